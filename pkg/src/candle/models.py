"""Binary student, full-precision teacher with multi-resolution head, and the loss balancer."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import bitcore
from .autograd import Node, Role, no_grad
from .errors import NonFiniteLoss, ShapeMismatch
from .nn import BatchNorm2d, BinaryConv2d, Conv2d, Linear, Module, ReLU, Sequential, make_activation


def _dtype(cfg):
    return np.float64 if cfg.dtype == "float64" else np.float32


def _shortcut(x: Node, cout: int, stride: int) -> Node:
    if stride > 1:
        x = ag.avgpool2d(x, stride)
    if x.shape[1] != cout:
        reps = cout // x.shape[1]
        x = ag.channel_concat([x] * reps)
    return x


class BinaryBlock(Module):
    """sign -> binary conv (scaled) -> BN -> (+ shortcut) -> activation."""

    def __init__(self, cin, cout, stride, rng, cfg, dtype):
        super().__init__()
        self.cout = cout
        self.stride = stride
        self.residual = cfg.residual and cout % cin == 0
        self.conv = BinaryConv2d(cin, cout, 3, rng, stride=stride, learned_scale=cfg.learned_scale,
                                 ste_clip=cfg.ste_clip, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.act = make_activation(cfg.activation, cout, dtype=dtype)

    def forward(self, x):
        y = self.bn(self.conv(x))
        if self.residual:
            y = y + _shortcut(x, self.cout, self.stride)
        return self.act(y)

    def forward_packed(self, x: np.ndarray) -> np.ndarray:
        """Inference through the XNOR/popcount kernel (eval mode only)."""
        alpha = self.conv.alpha().value
        y = bitcore.binary_conv2d(x, self.conv.weight.value, alpha, self.stride, self.conv.padding)
        y = y.astype(x.dtype)
        with no_grad():
            y = self.bn(Node(y))
            if self.residual:
                y = y + _shortcut(Node(x), self.cout, self.stride)
            return self.act(y).value


class BinaryModel(Module):
    """Float stem, four binary blocks (stride 2 on every other), pooled features, float classifier."""

    def __init__(self, cfg, num_classes: int, rng):
        super().__init__()
        dtype = _dtype(cfg)
        w = cfg.binary_width
        self.feature_width = 4 * w
        self.stem = Sequential(
            Conv2d(3, w, 3, rng, stride=cfg.stem_stride, dtype=dtype),
            BatchNorm2d(w, dtype=dtype),
            make_activation(cfg.activation, w, dtype=dtype),
        )
        plan = [(w, w, 1), (w, 2 * w, 2), (2 * w, 2 * w, 1), (2 * w, 4 * w, 2)]
        self.blocks = Sequential(*[BinaryBlock(ci, co, s, rng, cfg, dtype) for ci, co, s in plan])
        self.classifier = Linear(self.feature_width, num_classes, rng, role=Role.CLASSIFIER, dtype=dtype)
        self.assign_names()

    def features(self, x) -> Node:
        if not isinstance(x, Node):
            x = Node(np.asarray(x, dtype=self.stem.layers[0].weight.dtype))
        return ag.global_avgpool(self.blocks(self.stem(x)))

    def forward(self, x):
        feat = self.features(x)
        return feat, self.classifier(feat)

    def encoder_params(self):
        return [p for p in self.params() if p.role is Role.ENCODER]

    def classifier_params(self):
        return [p for p in self.params() if p.role is Role.CLASSIFIER]

    def predict_logits(self, x: np.ndarray, batch_size: int = 256, packed: bool = False) -> np.ndarray:
        was_training = self.training
        self.eval()
        out = []
        with no_grad():
            for i in range(0, x.shape[0], batch_size):
                xb = np.asarray(x[i:i + batch_size], dtype=self.classifier.weight.dtype)
                if packed:
                    h = self.stem(Node(xb)).value
                    for block in self.blocks.layers:
                        h = block.forward_packed(h)
                    feat = Node(h.mean(axis=(2, 3)))
                else:
                    feat = self.features(xb)
                out.append(self.classifier(feat).value)
        self.train(was_training)
        return np.concatenate(out)


class TeacherModel(Module):
    """Float CNN encoder plus the calibration head.

    The head has one 1x1 matching conv per resolution (encoder width -> D_B)
    and a linear classifier over the concatenated matched maps (3 * D_B, or
    D_B in single-resolution mode). ``pretrain_head`` is only used while
    pretraining the encoder on balanced data.
    """

    def __init__(self, cfg, num_classes: int, rng):
        super().__init__()
        dtype = _dtype(cfg)
        w = cfg.teacher_width
        self.resolutions = cfg.resolution_tuple
        self.multi_res = cfg.multi_res
        self.encoder_width = 4 * w
        self.feature_width = cfg.feature_width
        self.num_classes = num_classes
        self.encoder = Sequential(
            Conv2d(3, w, 3, rng, stride=2, dtype=dtype), BatchNorm2d(w, dtype=dtype), ReLU(),
            Conv2d(w, 2 * w, 3, rng, stride=1, dtype=dtype), BatchNorm2d(2 * w, dtype=dtype), ReLU(),
            Conv2d(2 * w, 4 * w, 3, rng, stride=2, dtype=dtype), BatchNorm2d(4 * w, dtype=dtype), ReLU(),
        )
        self.pretrain_head = Linear(4 * w, num_classes, rng, dtype=dtype)
        d_b = self.feature_width
        self.match_s = Conv2d(4 * w, d_b, 1, rng, padding=0, bias=True, role=Role.CLASSIFIER, dtype=dtype)
        self.match_b = Conv2d(4 * w, d_b, 1, rng, padding=0, bias=True, role=Role.CLASSIFIER, dtype=dtype)
        self.match_l = Conv2d(4 * w, d_b, 1, rng, padding=0, bias=True, role=Role.CLASSIFIER, dtype=dtype)
        width = 3 * d_b if self.multi_res else d_b
        self.classifier = Linear(width, num_classes, rng, role=Role.CLASSIFIER, dtype=dtype)
        self.assign_names()

    @property
    def dtype(self):
        return self.classifier.weight.dtype

    def head_modules(self):
        return [self.match_s, self.match_b, self.match_l, self.classifier]

    def head_params(self):
        return [p for m in self.head_modules() for p in m.params()]

    def encoder_params(self):
        return self.encoder.params()

    def freeze_encoder(self):
        self.encoder.set_role(Role.TEACHER_FROZEN)
        self.pretrain_head.set_role(Role.TEACHER_FROZEN)

    def freeze_all(self):
        self.set_role(Role.TEACHER_FROZEN)

    def encode(self, x) -> Node:
        if not isinstance(x, Node):
            x = Node(np.asarray(x, dtype=self.dtype))
        return self.encoder(x)

    def pretrain_logits(self, x) -> Node:
        return self.pretrain_head(ag.global_avgpool(self.encode(x)))

    def encoder_maps(self, x: np.ndarray) -> list[np.ndarray]:
        """Frozen encoder feature maps for the S, B, L (or B only) inputs."""
        s, b, l_ = self.resolutions
        if x.shape[2] != b or x.shape[3] != b:
            raise ShapeMismatch(f"teacher expects {b}x{b} inputs, got {x.shape[2]}x{x.shape[3]}")
        x = np.asarray(x, dtype=self.dtype)
        with no_grad():
            if not self.multi_res:
                return [self.encode(x).value]
            return [self.encode(ag.resize_nearest_array(x, r)).value for r in (s, b, l_)]

    def head(self, maps: list[np.ndarray]) -> tuple[Node, Node]:
        """Matching convs, resize to the B grid, channel concat, pool, classify.

        Returns the pooled B-resolution matched feature and the logits.
        """
        if not self.multi_res:
            m_b = self.match_b(Node(maps[0]))
            pooled = ag.global_avgpool(m_b)
            return pooled, self.classifier(pooled)
        f_s, f_b, f_l = (Node(m) for m in maps)
        grid = f_b.shape[2]
        m_s = ag.nearest_resize(self.match_s(f_s), grid)
        m_b = self.match_b(f_b)
        m_l = ag.nearest_resize(self.match_l(f_l), grid)
        pooled = ag.global_avgpool(ag.channel_concat([m_s, m_b, m_l]))
        logits = self.classifier(pooled)
        d = self.feature_width
        return ag.slice_channels(pooled, d, 2 * d), logits

    def forward(self, x) -> tuple[Node, Node]:
        return self.head(self.encoder_maps(np.asarray(x.value if isinstance(x, Node) else x)))

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        was_training = self.training
        self.eval()
        out = []
        with no_grad():
            for i in range(0, x.shape[0], batch_size):
                out.append(self.forward(x[i:i + batch_size])[1].value)
        self.train(was_training)
        return np.concatenate(out)


class Balancer(Module):
    """MLP 2 -> 18 -> 34 -> 50 -> 1 with ReLU and a sigmoid output.

    The output layer starts at zero so the initial mixing weight is exactly 0.5.
    """

    def __init__(self, rng, dtype=np.float32, hidden=(18, 34, 50)):
        super().__init__()
        widths = (2,) + tuple(hidden)
        self.hidden = Sequential(*[
            Linear(widths[i], widths[i + 1], rng, role=Role.BALANCER, dtype=dtype)
            for i in range(len(hidden))
        ])
        self.out = Linear(widths[-1], 1, rng, role=Role.BALANCER, dtype=dtype, zero_init=True)
        self.last_lambda = 0.5
        self.last_k = float("nan")
        self.last_f = float("nan")
        self.assign_names("balancer.")

    def forward(self, k: float, f: float) -> Node:
        k, f = float(k), float(f)
        if not (np.isfinite(k) and np.isfinite(f)):
            raise NonFiniteLoss(f"balancer inputs must be finite, got K={k}, F={f}")
        h = Node(np.array([[k, f]], dtype=self.out.weight.dtype))
        for layer in self.hidden.layers:
            h = ag.relu(layer(h))
        lam = ag.sigmoid(self.out(h))
        self.last_lambda = float(lam.value.reshape(()))
        self.last_k, self.last_f = k, f
        return ag.reshape(lam, ())


def balancer_forward(k: float, f: float, balancer: Balancer) -> Node:
    return balancer(k, f)
