"""Scalar training objectives as fused graph nodes.

Teacher-side arguments are read by value only: no gradient ever flows back
into them, whatever they are attached to.
"""

from __future__ import annotations

import numpy as np

from .autograd import Node, _make
from .errors import InvalidLabel, ShapeMismatch


def _values(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidLabel(f"labels must lie in [0, {k})")
    return labels


def _soft_target_ce(logits: Node, target: np.ndarray, op: str) -> Node:
    z = logits.value
    n = z.shape[0]
    logp = log_softmax(z)
    loss = -(target * logp).sum() / n

    def bwd(g):
        return (g * (np.exp(logp) - target) / n,)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bwd, op)


def cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    target = np.zeros_like(logits.value)
    target[np.arange(n), labels] = 1
    return _soft_target_ce(logits, target, "CE")


def label_smoothing_per_class(class_counts, eps_head: float, eps_tail: float) -> np.ndarray:
    """Smoothing strength per class, linear in class frequency.

    The most frequent class gets ``eps_head`` and the rarest ``eps_tail``.
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    lo, hi = counts.min(), counts.max()
    if hi == lo:
        return np.full(counts.shape, eps_head)
    return eps_tail + (eps_head - eps_tail) * (counts - lo) / (hi - lo)


def lt_aware_ce(logits: Node, labels, class_counts, eps_head: float = 0.0,
                eps_tail: float = 0.1) -> Node:
    """Cross-entropy against label-aware smoothed targets."""
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    if not (0 <= eps_head < 1 and 0 <= eps_tail < 1):
        raise ValueError("smoothing strengths must lie in [0, 1)")
    if len(class_counts) != k:
        raise ShapeMismatch(f"{len(class_counts)} class counts for {k} logits")
    if k == 1:
        return _make(np.zeros((), dtype=logits.dtype), (logits,),
                     lambda g: (np.zeros_like(logits.value),), "LTAwareCE")
    eps = label_smoothing_per_class(class_counts, eps_head, eps_tail)[labels]
    target = np.repeat((eps / (k - 1))[:, None], k, axis=1)
    target[np.arange(n), labels] = 1 - eps
    return _soft_target_ce(logits, target.astype(logits.dtype), "LTAwareCE")


def kl_div(teacher_logits, student_logits: Node, temperature: float = 1.0) -> Node:
    """T^2 * mean KL(softmax(teacher/T) || softmax(student/T))."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = _values(teacher_logits)
    s = student_logits.value
    if t.shape != s.shape:
        raise ShapeMismatch(f"teacher {t.shape} vs student {s.shape}")
    n = s.shape[0]
    tau = temperature
    logp_t = log_softmax(t.astype(s.dtype) / tau)
    logp_s = log_softmax(s / tau)
    p_t = np.exp(logp_t)
    kl = (p_t * (logp_t - logp_s)).sum() / n
    value = max(float(kl), 0.0) * tau * tau

    def bwd(g):
        return (g * tau * (np.exp(logp_s) - p_t) / n,)

    return _make(np.asarray(value, dtype=s.dtype), (student_logits,), bwd, "KL")


def feature_similarity(teacher_feat, student_feat: Node, eps: float = 1e-8) -> Node:
    """Mean cosine distance 1 - cos(e_t, e_b) over the batch."""
    t = _values(teacher_feat).astype(student_feat.dtype)
    b = student_feat.value
    if t.shape != b.shape:
        raise ShapeMismatch(f"teacher {t.shape} vs student {b.shape}")
    n = b.shape[0]
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    bn = np.linalg.norm(b, axis=1, keepdims=True)
    dot = (t * b).sum(axis=1, keepdims=True)
    denom = tn * bn + eps
    cos = dot / denom
    loss = float((1.0 - cos).mean())

    def bwd(g):
        unit_b = np.divide(b, bn, out=np.zeros_like(b), where=bn > 0)
        dcos = t / denom - dot * tn * unit_b / denom ** 2
        return (-g * dcos / n,)

    return _make(np.asarray(loss, dtype=b.dtype), (student_feat,), bwd, "FS")
