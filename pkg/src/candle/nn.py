"""Layer modules built on the autograd ops."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Node, Param, Role


class Module:
    """Holds named params, buffers and child modules in definition order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_params(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_params(f"{prefix}{cname}.")

    def assign_names(self, prefix: str = ""):
        """Rename every param to its dotted path; call once on the root module."""
        for name, p in self.named_params(prefix):
            p.name = name
        return self

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def set_role(self, role: Role, trainable: bool | None = None):
        for p in self.params():
            if role is Role.TEACHER_FROZEN or trainable is False:
                p.freeze(role)
            else:
                p.unfreeze(role)

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.value for name, p in self.named_params()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        from .errors import MissingTensor

        for name, p in self.named_params():
            if name not in state:
                if strict:
                    raise MissingTensor(name)
                continue
            p.value[...] = np.asarray(state[name], dtype=p.value.dtype).reshape(p.value.shape)
        for name, b in self.named_buffers():
            if name not in state:
                if strict:
                    raise MissingTensor(name)
                continue
            b[...] = np.asarray(state[name], dtype=b.dtype).reshape(b.shape)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, bias=False,
                 role=Role.ENCODER, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Param("weight", _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), role)
        if bias:
            self.bias = Param("bias", np.zeros(cout, dtype=dtype), role)
        else:
            self.bias = None

    def forward(self, x):
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BinaryConv2d(Module):
    """Convolution with sign-binarized weights and activations and per-channel scale.

    Scale defaults to mean |w| per output channel (differentiable); with
    ``learned_scale`` it is a free parameter initialized the same way.
    """

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, learned_scale=False,
                 ste_clip=1.0, role=Role.ENCODER, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.ste_clip = ste_clip
        w = _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.weight = Param("weight", w, role)
        self.learned_scale = learned_scale
        if learned_scale:
            alpha = np.abs(w).reshape(cout, -1).mean(axis=1).astype(dtype)
            self.scale = Param("scale", alpha, role)

    def alpha(self):
        if self.learned_scale:
            return self.scale
        w = self.weight
        return ag.mean(ag.abs_(w), axis=(1, 2, 3))

    def forward(self, x):
        xb = ag.ste_sign(x, self.ste_clip)
        wb = ag.ste_sign(self.weight, self.ste_clip)
        y = ag.conv2d(xb, wb, None, self.stride, self.padding, pad_value=1.0)
        return y * ag.reshape(self.alpha(), (1, -1, 1, 1))


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True, role=Role.ENCODER, dtype=np.float32, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((dout, din), dtype=dtype)
        else:
            w = _kaiming_uniform(rng, (dout, din), din, dtype) / math.sqrt(2.0)
        self.weight = Param("weight", w, role)
        self.bias = Param("bias", np.zeros(dout, dtype=dtype), role) if bias else None

    def forward(self, x):
        return ag.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, c, role=Role.ENCODER, dtype=np.float32, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param("gamma", np.ones(c, dtype=dtype), role)
        self.beta = Param("beta", np.zeros(c, dtype=dtype), role)
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x):
        return ag.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class PReLU(Module):
    def __init__(self, c, role=Role.ENCODER, dtype=np.float32, init=0.25):
        super().__init__()
        self.slope = Param("slope", np.full(c, init, dtype=dtype), role)

    def forward(self, x):
        return ag.prelu(x, self.slope)


class ReLU(Module):
    def forward(self, x):
        return ag.relu(x)


def make_activation(kind: str, c: int, role=Role.ENCODER, dtype=np.float32) -> Module:
    if kind == "prelu":
        return PReLU(c, role, dtype)
    if kind == "relu":
        return ReLU()
    raise ValueError(f"unknown activation {kind!r}")


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        object.__setattr__(self, "layers", list(layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def as_input(x, dtype=np.float32) -> Node:
    """Wrap a data array as a constant graph input."""
    return Node(np.asarray(x, dtype=dtype))
