"""Finite-difference gradient cases shared by the unit tests and the acceptance gate.

Each case draws random inputs and returns them together with a function
building a graph from Nodes.  The analytic gradient is taken at the working
dtype; the finite-difference oracle always evaluates in float64.
"""

import numpy as np

from candle import autograd as ag
from candle import losses
from candle.autograd import Node, Param

from oracles import central_difference, rel_error

KINK_MARGIN = 0.05


def _away_from(x, points, margin=KINK_MARGIN):
    """Push entries of x off non-differentiable points."""
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + np.where(x >= p, margin, -margin) * 2, x)
    return x


def _bn_train(x, g, b):
    c = x.shape[1]
    return ag.batchnorm2d(x, g, b, np.zeros(c, x.dtype), np.ones(c, x.dtype), training=True)


def _bn_eval(x, g, b):
    c = x.shape[1]
    rm = np.linspace(-0.5, 0.5, c).astype(x.dtype)
    rv = np.linspace(0.5, 2.0, c).astype(x.dtype)
    return ag.batchnorm2d(x, g, b, rm, rv, training=False)


def case_conv(rng):
    n, c, co, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3]))
    h = int(rng.integers(k, 7))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    pad_value = float(rng.choice([0.0, 1.0]))
    xs = [rng.normal(size=(n, c, h, h)), rng.normal(size=(co, c, k, k)), rng.normal(size=co)]
    return xs, lambda x, w, b: ag.conv2d(x, w, b, stride, padding, pad_value)


def case_linear(rng):
    n, d, k = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 5)
    xs = [rng.normal(size=(n, d)), rng.normal(size=(k, d)), rng.normal(size=k)]
    return xs, ag.linear


def case_matmul(rng):
    a, b, c = rng.integers(1, 5, size=3)
    return [rng.normal(size=(a, b)), rng.normal(size=(b, c))], ag.matmul


def case_batchnorm_train(rng):
    # with very few samples per channel the normalized output is nearly constant
    n, c, h = rng.integers(2, 4), rng.integers(1, 4), rng.integers(2, 4)
    xs = [rng.normal(size=(n, c, h, h)), rng.uniform(0.5, 1.5, size=c), rng.normal(size=c)]
    return xs, _bn_train


def case_batchnorm_eval(rng):
    n, c, h = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    xs = [rng.normal(size=(n, c, h, h)), rng.uniform(0.5, 1.5, size=c), rng.normal(size=c)]
    return xs, _bn_eval


def case_relu(rng):
    return [_away_from(rng.normal(size=(3, 4)), [0.0])], ag.relu


def case_prelu(rng):
    c = int(rng.integers(1, 4))
    x = _away_from(rng.normal(size=(2, c, 3, 3)), [0.0])
    return [x, rng.uniform(0.0, 0.5, size=c)], ag.prelu


def case_sigmoid(rng):
    return [rng.normal(scale=3.0, size=(4, 3))], ag.sigmoid


def case_abs(rng):
    return [_away_from(rng.normal(size=(5,)), [0.0])], ag.abs_


def case_elementwise(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    return [a, b], lambda x, y: ag.mean(ag.mul(ag.add(x, y), x) - y, axis=0)


def case_avgpool(rng):
    k = int(rng.integers(1, 3))
    h = k * int(rng.integers(1, 4))
    return [rng.normal(size=(2, 2, h, h))], lambda x: ag.avgpool2d(x, k)


def case_global_avgpool(rng):
    return [rng.normal(size=(2, 3, 3, 3))], ag.global_avgpool


def case_resize_up(rng):
    h = int(rng.integers(1, 4))
    return [rng.normal(size=(2, 2, h, h))], lambda x: ag.nearest_resize(x, 2 * h)


def case_resize_down(rng):
    h = 2 * int(rng.integers(1, 4))
    return [rng.normal(size=(2, 2, h, h))], lambda x: ag.nearest_resize(x, h // 2)


def case_concat_slice(rng):
    c1, c2 = rng.integers(1, 4, size=2)
    xs = [rng.normal(size=(2, c1, 2, 2)), rng.normal(size=(2, c2, 2, 2))]
    return xs, lambda a, b: ag.slice_channels(ag.channel_concat([a, b]), 1, int(c1 + c2))


def case_cross_entropy(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    labels = rng.integers(0, k, size=n)
    return [rng.normal(size=(n, k))], lambda z: losses.cross_entropy(z, labels)


def case_lt_aware_ce(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    labels = rng.integers(0, k, size=n)
    counts = rng.integers(1, 100, size=k)
    return [rng.normal(size=(n, k))], lambda z: losses.lt_aware_ce(z, labels, counts, 0.05, 0.3)


def case_kl(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    teacher = rng.normal(size=(n, k))
    t = float(rng.uniform(0.5, 4.0))
    return [rng.normal(size=(n, k))], lambda z: losses.kl_div(teacher, z, t)


def case_feature_similarity(rng):
    # with D = 1 the cosine is constant at +-1
    n, d = int(rng.integers(1, 6)), int(rng.integers(2, 8))
    teacher = rng.normal(size=(n, d))
    return [rng.normal(size=(n, d))], lambda e: losses.feature_similarity(teacher, e)


def case_ste_sign(rng):
    """The surrogate: STE grads must equal the derivative of clip(x, -1, 1)."""
    x = _away_from(rng.uniform(-2, 2, size=(6,)), [-1.0, 1.0])
    return [x], ag.ste_sign


def ste_surrogate(x):
    return Node(np.clip(x.value, -1.0, 1.0))


CASES = {
    "conv2d": case_conv,
    "linear": case_linear,
    "matmul": case_matmul,
    "batchnorm2d_train": case_batchnorm_train,
    "batchnorm2d_eval": case_batchnorm_eval,
    "relu": case_relu,
    "prelu": case_prelu,
    "sigmoid": case_sigmoid,
    "abs": case_abs,
    "add_mul_mean": case_elementwise,
    "avgpool2d": case_avgpool,
    "global_avgpool": case_global_avgpool,
    "nearest_resize_up": case_resize_up,
    "nearest_resize_down": case_resize_down,
    "channel_concat_slice": case_concat_slice,
    "cross_entropy": case_cross_entropy,
    "lt_aware_ce": case_lt_aware_ce,
    "kl_div": case_kl,
    "feature_similarity": case_feature_similarity,
    "ste_sign": case_ste_sign,
}

# ops whose finite-difference reference is a different (surrogate) function
FD_OVERRIDES = {"ste_sign": ste_surrogate}


def _project(out_value, proj):
    return float((np.asarray(out_value, dtype=np.float64) * proj).sum())


def check_case(name, rng, dtype=np.float32, h_scale=1e-3):
    """Return the relative error between analytic and finite-difference grads."""
    xs, fn = CASES[name](rng)
    fd_fn = FD_OVERRIDES.get(name, fn)
    params = [Param(f"in{i}", np.asarray(x, dtype=dtype)) for i, x in enumerate(xs)]
    out = fn(*params)
    proj = rng.normal(size=out.shape)
    ag.backward(ag.sum_(ag.mul(out, Node(proj.astype(dtype)))))
    analytic = [p.grad.astype(np.float64) for p in params]

    # oracle: same values in float64
    ref = [np.asarray(p.value, dtype=np.float64).copy() for p in params]

    def f():
        with ag.no_grad():
            return _project(fd_fn(*[Node(r) for r in ref]).value, proj)

    errs = []
    for a, r in zip(analytic, ref):
        errs.append(rel_error(a, central_difference(f, r, h_scale)))
    return max(errs)


def _clear_relu_kinks(bal, k, f, margin=0.2):
    """Shift hidden biases so every pre-activation is at least ``margin`` from zero."""
    h = np.array([[k, f]])
    for layer in bal.hidden.layers:
        z = h @ layer.weight.value.T.astype(np.float64) + layer.bias.value
        near = np.abs(z[0]) < margin
        shift = np.where(z[0] >= 0, margin, -margin) * near
        layer.bias.value[...] += shift.astype(layer.bias.value.dtype)
        h = np.maximum(z + shift, 0)


def check_balancer(rng, dtype=np.float32):
    from candle.models import Balancer

    bal = Balancer(rng, dtype=dtype)
    # a nonzero output layer exercises every weight
    bal.out.weight.value[...] = rng.normal(scale=0.5, size=bal.out.weight.shape).astype(dtype)
    k, f = float(rng.uniform(0, 3)), float(rng.uniform(0, 2))
    _clear_relu_kinks(bal, k, f)
    bal.zero_grad()
    ag.backward(bal(k, f))
    worst = 0.0
    for p in bal.params():
        analytic = p.grad.astype(np.float64)
        saved = p.value
        ref = saved.astype(np.float64)
        others = {q.name: q.value for q in bal.params()}

        def lam():
            for q in bal.params():
                q.value = others[q.name].astype(np.float64)
            p.value = ref
            with ag.no_grad():
                out = float(bal(k, f).value)
            return out

        fd = central_difference(lam, ref)
        for q in bal.params():
            q.value = others[q.name]
        p.value = saved
        worst = max(worst, rel_error(analytic, fd))
    return worst
