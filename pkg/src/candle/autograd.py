"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Node` wraps an array. Operations on nodes record their inputs and a
backward closure only when gradients are enabled and at least one input
requires them, so anything computed from frozen parameters or inside
:func:`no_grad` never enters a backward graph.
"""

from __future__ import annotations

import contextlib
import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidShape, ShapeMismatch

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Role(enum.Enum):
    ENCODER = "encoder"
    CLASSIFIER = "classifier"
    BALANCER = "balancer"
    TEACHER_FROZEN = "teacher_frozen"


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "op")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value)
        self._grad = None
        self.parents: tuple[Node, ...] = ()
        self._backward = None
        self.requires_grad = requires_grad
        self.op = op

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def grad_allocated(self) -> bool:
        return self._grad is not None

    def zero_grad(self):
        self._grad = None

    def _accumulate(self, g):
        if self._grad is None:
            self._grad = np.array(g, dtype=self.value.dtype, copy=True).reshape(self.value.shape)
        else:
            self._grad += g

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def detach(self) -> Node:
        return Node(self.value)

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a node is not supported")
        return mul(self, 1.0 / other)


class Param(Node):
    """A named trainable (or frozen) tensor."""

    __slots__ = ("name", "role", "trainable")

    def __init__(self, name: str, value, role: Role = Role.ENCODER, trainable: bool = True):
        if role is Role.TEACHER_FROZEN:
            trainable = False
        super().__init__(value, requires_grad=trainable, op="param")
        self.name = name
        self.role = role
        self.trainable = trainable

    def freeze(self, role: Role | None = None):
        if role is not None:
            self.role = role
        self.trainable = False
        self.requires_grad = False
        self._grad = None

    def unfreeze(self, role: Role):
        if role is Role.TEACHER_FROZEN:
            raise ValueError("a TeacherFrozen parameter cannot be trainable")
        self.role = role
        self.trainable = True
        self.requires_grad = True

    def __repr__(self):
        return f"Param({self.name}, role={self.role.value}, shape={self.value.shape})"


def _lift(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else None
    return Node(np.asarray(x, dtype=dtype))


def _make(value, parents, backward_fn, op: str) -> Node:
    out = Node(value, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


@dataclass
class Graph:
    """Topologically ordered nodes reachable from an output."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Node) -> Graph:
        order: list[Node] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            # reversed push keeps the left-to-right input order
            for parent in reversed(node.parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(output: Node, grad=None):
    """Accumulate d(output)/d(leaf) into every reachable leaf that requires grad.

    ``grad`` seeds the output gradient; it may be omitted only for scalars.
    """
    if grad is None:
        if output.value.size != 1:
            raise InvalidShape(f"backward on non-scalar output of shape {output.value.shape}")
        grad = np.ones_like(output.value)
    else:
        grad = np.asarray(grad, dtype=output.dtype)
        if grad.shape != output.value.shape:
            raise ShapeMismatch(f"seed gradient {grad.shape} vs output {output.value.shape}")
    if not output.requires_grad:
        return
    graph = Graph.trace(output)
    grads: dict[int, np.ndarray] = {id(output): grad}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node._accumulate(g)
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Node:
    a = _lift(a, b if isinstance(b, Node) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.value + b.value, (a, b), bwd, "add")


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Node:
    a = _lift(a, b if isinstance(b, Node) else None)
    b = _lift(b, a)
    av, bv = a.value, b.value

    def bwd(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av * bv, (a, b), bwd, "mul")


def sum_(x: Node, axis=None, keepdims: bool = False) -> Node:
    shape = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.value.sum(axis=axis, keepdims=keepdims), (x,), bwd, "sum")


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    if axis is None:
        count = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Node, shape) -> Node:
    orig = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def flatten(x: Node) -> Node:
    return reshape(x, (x.shape[0], -1))


def abs_(x: Node) -> Node:
    xv = x.value
    return _make(np.abs(xv), (x,), lambda g: (g * np.sign(xv),), "abs")


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def prelu(x: Node, slope: Node) -> Node:
    """Per-channel PReLU; ``slope`` has one entry per channel (axis 1)."""
    xv = x.value
    shape = (1, -1) + (1,) * (xv.ndim - 2)
    a = slope.value.reshape(shape)
    pos = xv > 0
    reduce_axes = tuple(i for i in range(xv.ndim) if i != 1)

    def bwd(g):
        gx = g * np.where(pos, 1, a)
        ga = (g * np.where(pos, 0, xv)).sum(axis=reduce_axes) if slope.requires_grad else None
        return gx, ga

    return _make(np.where(pos, xv, a * xv), (x, slope), bwd, "prelu")


def sigmoid(x: Node) -> Node:
    xv = x.value
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def ste_sign(x: Node, clip: float = 1.0) -> Node:
    """sign(x) in {-1,+1} (sign(0)=+1); backward passes grads where |x| <= clip."""
    xv = x.value
    window = np.abs(xv) <= clip
    out = np.where(xv >= 0, 1, -1).astype(xv.dtype)
    return _make(out, (x,), lambda g: (g * window,), "ste_sign")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value

    def bwd(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), bwd, "matmul")


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """x (N,D) @ weight(K,D)^T + bias(K)."""
    xv, wv = x.value, weight.value
    if xv.shape[-1] != wv.shape[1]:
        raise ShapeMismatch(f"linear input width {xv.shape[-1]} vs weight {wv.shape}")
    out = xv @ wv.T
    parents = (x, weight)
    if bias is not None:
        out = out + bias.value
        parents = (x, weight, bias)

    def bwd(g):
        gx = g @ wv if x.requires_grad else None
        gw = g.T @ xv if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, bwd, "linear")


def _im2col(xv: np.ndarray, k: int, stride: int, padding: int, pad_value: float):
    if padding:
        xv = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=pad_value)
    n, c, hp, wp = xv.shape
    win = sliding_window_view(xv, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, (n, c, hp, wp, ho, wo)


def conv2d(x: Node, weight: Node, bias: Node | None = None, stride: int = 1,
           padding: int = 0, pad_value: float = 0.0) -> Node:
    """2-D cross-correlation, x (N,C,H,W), weight (Co,C,k,k).

    ``pad_value`` fills the border; binary layers pad with +1 so the float
    path matches the XNOR kernel's sign(0)=+1 convention.
    """
    xv, wv = x.value, weight.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise InvalidShape("conv2d expects 4-D input and weight")
    co, ci, k, _ = wv.shape
    if xv.shape[1] != ci:
        raise ShapeMismatch(f"conv2d input has {xv.shape[1]} channels, weight expects {ci}")
    cols, (n, c, hp, wp, ho, wo) = _im2col(xv, k, stride, padding, pad_value)
    wmat = wv.reshape(co, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.value.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gw = (g2.T @ cols).reshape(wv.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros((n, c, hp, wp), dtype=xv.dtype)
            hs = stride * (ho - 1) + 1
            ws = stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:hp - padding, padding:wp - padding] if padding else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, bwd, "conv2d")


def batchnorm2d(x: Node, gamma: Node, beta: Node, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Node:
    """Batch normalization over (N,H,W); running buffers are updated in place."""
    xv = x.value
    shape = (1, -1, 1, 1)
    if training:
        m = xv.shape[0] * xv.shape[2] * xv.shape[3]
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = (xv - mu.reshape(shape)) * inv_std.reshape(shape)
    gv = gamma.value.reshape(shape)
    out = gv * xhat + beta.value.reshape(shape)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gv
            if training:
                mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (dxhat - mean_d - xhat * mean_dx) * inv_std.reshape(shape)
            else:
                gx = dxhat * inv_std.reshape(shape)
        return gx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bwd, "batchnorm2d")


def avgpool2d(x: Node, k: int) -> Node:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeMismatch(f"avgpool2d window {k} does not tile {h}x{w}")
    out = x.value.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bwd(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (g / (k * k),)

    return _make(out, (x,), bwd, "avgpool2d")


def global_avgpool(x: Node) -> Node:
    n, c, h, w = x.shape
    out = x.value.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _make(out, (x,), bwd, "global_avgpool")


def resize_nearest_array(xv: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of (N,C,H,W) square maps by an integer ratio."""
    h = xv.shape[2]
    if size == h:
        return xv
    if size > h:
        if size % h:
            raise ShapeMismatch(f"cannot upsample {h} to {size} by an integer factor")
        f = size // h
        return np.repeat(np.repeat(xv, f, axis=2), f, axis=3)
    if h % size:
        raise ShapeMismatch(f"cannot downsample {h} to {size} by an integer factor")
    f = h // size
    return np.ascontiguousarray(xv[:, :, ::f, ::f])


def nearest_resize(x: Node, size: int) -> Node:
    """Nearest resize; upsampling replicates pixels, downsampling keeps the top-left of each block."""
    n, c, h, w = x.shape
    if size == h:
        return x
    out = resize_nearest_array(x.value, size)

    def bwd(g):
        if size > h:
            f = size // h
            return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)
        f = h // size
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, ::f, ::f] = g
        return (gx,)

    return _make(out, (x,), bwd, "nearest_resize")


def channel_concat(xs: list[Node]) -> Node:
    if not xs:
        raise InvalidShape("channel_concat of an empty list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeMismatch(f"cannot concat {t.shape} with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.value for t in xs], axis=1)

    def bwd(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(out, tuple(xs), bwd, "channel_concat")


def slice_channels(x: Node, start: int, stop: int) -> Node:
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.value[:, start:stop], (x,), bwd, "slice_channels")


# ---------------------------------------------------------------- optimizers


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    step = min(max(step, 0), total_steps)
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def _select(params, roles):
    if roles is None:
        return [p for p in params if p.trainable]
    roles = {roles} if isinstance(roles, Role) else set(roles)
    return [p for p in params if p.trainable and p.role in roles]


@dataclass
class OptimState:
    """Per-parameter moment buffers and step counts, keyed by parameter name."""

    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


class Optimizer:
    def __init__(self, params, lr: float, weight_decay: float = 0.0, maximize: bool = False):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique within an optimizer")
        self.lr = lr
        self.weight_decay = weight_decay
        self.maximize = maximize
        self.state = OptimState()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, roles=None):
        for p in _select(self.params, roles):
            if not p.grad_allocated:
                g = np.zeros_like(p.value)
            else:
                g = p._grad
            if self.maximize:
                g = -g
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            self._update(p, g)

    def _update(self, p: Param, g: np.ndarray):
        raise NotImplementedError

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, bufs in self.state.buffers.items():
            for key, arr in bufs.items():
                out[f"{name}/{key}"] = arr
            out[f"{name}/step"] = np.asarray(self.state.steps[name], dtype=np.float32)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        self.state = OptimState()
        for full, arr in tensors.items():
            name, key = full.rsplit("/", 1)
            if key == "step":
                self.state.steps[name] = int(arr)
            else:
                self.state.buffers.setdefault(name, {})[key] = np.array(arr)


def adam_step(params, state: OptimState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0, roles=None, maximize: bool = False):
    """One bias-corrected Adam update of the trainable params matching ``roles``.

    Moment buffers are allocated lazily, so parameters that are never stepped
    (frozen teacher weights in particular) never get optimizer state.
    """
    b1, b2 = betas
    for p in _select(params, roles):
        g = p._grad if p.grad_allocated else np.zeros_like(p.value)
        if maximize:
            g = -g
        if weight_decay:
            g = g + weight_decay * p.value
        bufs = state.buffers.get(p.name)
        if bufs is None:
            bufs = {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value)}
            state.buffers[p.name] = bufs
            state.steps[p.name] = 0
        t = state.steps[p.name] + 1
        state.steps[p.name] = t
        m, v = bufs["m"], bufs["v"]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, maximize: bool = False):
        super().__init__(params, lr, weight_decay, maximize)
        self.betas = betas
        self.eps = eps

    def step(self, roles=None):
        adam_step(self.params, self.state, self.lr, self.betas, self.eps,
                  self.weight_decay, roles, self.maximize)


class SGD(Optimizer):
    def __init__(self, params, lr: float = 0.1, momentum: float = 0.0,
                 weight_decay: float = 0.0, maximize: bool = False):
        super().__init__(params, lr, weight_decay, maximize)
        self.momentum = momentum

    def _update(self, p, g):
        self.state.steps[p.name] = self.state.steps.get(p.name, 0) + 1
        if self.momentum:
            bufs = self.state.buffers.get(p.name)
            if bufs is None:
                bufs = {"momentum": np.array(g, copy=True)}
                self.state.buffers[p.name] = bufs
            else:
                bufs["momentum"] *= self.momentum
                bufs["momentum"] += g
            g = bufs["momentum"]
        p.value -= (self.lr * g).astype(p.value.dtype)

