"""Bit-packed ±1 tensors and XNOR/popcount arithmetic.

Dense tensors are plain ``numpy.ndarray`` objects. A ±1 tensor is packed along
its innermost axis into little-endian 64-bit words: element ``i`` of a row is
bit ``i % 64`` of word ``i // 64``. A set bit means +1, a clear bit means -1,
and the unused high bits of the last word of each row are always zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidShape, NonFiniteValue, ShapeMismatch

WORD_BITS = 64

# Bounds the (patches x out_channels x words) temporary in the conv kernel.
_CONV_CHUNK_ELEMS = 1 << 22


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Convert external input to a dense tensor, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("tensor contains NaN or Inf")
    return arr


def _row_mask(length: int) -> np.ndarray:
    """Per-word masks selecting the valid bits of one packed row."""
    nwords = max(1, -(-length // WORD_BITS))
    mask = np.full(nwords, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    tail = length % WORD_BITS
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


def _pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into uint64 words."""
    length = bits.shape[-1]
    nwords = max(1, -(-length // WORD_BITS))
    pad = nwords * WORD_BITS - length
    if pad:
        widths = [(0, 0)] * (bits.ndim - 1) + [(0, pad)]
        bits = np.pad(bits, widths, constant_values=False)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


@dataclass(frozen=True)
class BitTensor:
    """A ±1 tensor stored one bit per element.

    ``words`` has shape ``logical_shape[:-1] + (nwords,)``; the pack axis is
    always the innermost logical axis. Padding bits are cleared on
    construction so they can never leak into a popcount.
    """

    logical_shape: tuple[int, ...]
    words: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.logical_shape)
        if not shape or any(s <= 0 for s in shape):
            raise InvalidShape(f"invalid logical shape {shape}")
        words = np.array(self.words, dtype=np.uint64, copy=True)
        expected = shape[:-1] + (max(1, -(-shape[-1] // WORD_BITS)),)
        if words.shape != expected:
            raise InvalidShape(f"words shape {words.shape} != expected {expected}")
        words &= _row_mask(shape[-1])
        words.setflags(write=False)
        object.__setattr__(self, "logical_shape", shape)
        object.__setattr__(self, "words", words)

    @property
    def pack_axis(self) -> int:
        return len(self.logical_shape) - 1

    @property
    def row_length(self) -> int:
        return self.logical_shape[-1]

    @property
    def size(self) -> int:
        return int(np.prod(self.logical_shape))

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.logical_shape == other.logical_shape and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.logical_shape, self.words.tobytes()))


@dataclass(frozen=True)
class ScaleVector:
    """Per-output-channel nonnegative scaling factors."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("scale entries must be finite and nonnegative")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.shape[0]


def sign_bits(t: np.ndarray) -> np.ndarray:
    """Boolean sign with the tie at zero mapped to +1 (True)."""
    return np.asarray(t) >= 0


def sign(t: np.ndarray) -> np.ndarray:
    """Elementwise sign as ±1 with sign(0) = +1, preserving float dtype."""
    t = np.asarray(t)
    dtype = t.dtype if np.issubdtype(t.dtype, np.floating) else np.float32
    return np.where(t >= 0, 1.0, -1.0).astype(dtype, copy=False)


def sign_pack(t) -> BitTensor:
    t = np.asarray(t)
    if t.size == 0 or t.ndim == 0:
        raise InvalidShape("cannot pack an empty tensor")
    return BitTensor(t.shape, _pack_rows(sign_bits(t)))


def unpack(b: BitTensor, dtype=np.float32) -> np.ndarray:
    length = b.row_length
    raw = np.ascontiguousarray(b.words).astype("<u8", copy=False).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")[..., :length]
    return np.where(bits.astype(bool), 1.0, -1.0).astype(dtype).reshape(b.logical_shape)


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def xnor_dot(a: BitTensor, b: BitTensor) -> int:
    """Dot product of two packed ±1 vectors: 2 * popcount(XNOR) - n."""
    if a.size != b.size:
        raise ShapeMismatch(f"length mismatch: {a.size} vs {b.size}")
    if a.logical_shape != b.logical_shape:
        # same length but different layout: repack both as flat vectors
        a = sign_pack(unpack(a).reshape(-1))
        b = sign_pack(unpack(b).reshape(-1))
    n = a.size
    xnor = ~(a.words ^ b.words) & _row_mask(a.row_length)
    matches = int(popcount(xnor).sum(dtype=np.int64))
    return 2 * matches - n


def _patches(bits: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) bool -> (N,Ho,Wo,k*k*C) bool, channel-minor element order."""
    if padding:
        # zero padding binarizes to +1
        bits = np.pad(bits, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=True)
    win = sliding_window_view(bits, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 4, 5, 1).reshape(n, ho, wo, k * k * c)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def xnor_conv2d_counts(act, w, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Integer stage of the binary convolution.

    Returns the int32 tensor of ±1 dot products between every binarized
    activation patch and every binarized kernel, shaped (N, Co, Ho, Wo).
    """
    act = np.asarray(act)
    w = np.asarray(w)
    if act.ndim != 4 or w.ndim != 4:
        raise InvalidShape("expected act (N,C,H,W) and w (Co,C,k,k)")
    n, c, h, wd = act.shape
    co, ci, k, k2 = w.shape
    if ci != c:
        raise ShapeMismatch(f"activation has {c} channels, kernel expects {ci}")
    if k != k2:
        raise InvalidShape("only square kernels are supported")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise InvalidShape("kernel larger than padded input")

    length = k * k * c
    a_words = _pack_rows(_patches(sign_bits(act), k, stride, padding)).reshape(n * ho * wo, -1)
    w_words = _pack_rows(sign_bits(w).transpose(0, 2, 3, 1).reshape(co, length))
    mask = _row_mask(length)
    nwords = mask.shape[0]

    counts = np.empty((a_words.shape[0], co), dtype=np.int32)
    chunk = max(1, _CONV_CHUNK_ELEMS // (co * nwords))
    for start in range(0, a_words.shape[0], chunk):
        blk = a_words[start:start + chunk, None, :]
        xnor = ~(blk ^ w_words[None, :, :]) & mask
        counts[start:start + chunk] = popcount(xnor).sum(axis=-1, dtype=np.int32)
    dots = 2 * counts - np.int32(length)
    return dots.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)


def binary_conv2d(act, w, scale, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Scaled XNOR/popcount convolution of sign(act) with sign(w)."""
    scale = scale if isinstance(scale, ScaleVector) else ScaleVector(scale)
    co = np.asarray(w).shape[0]
    if len(scale) != co:
        raise ShapeMismatch(f"scale has {len(scale)} entries for {co} output channels")
    dots = xnor_conv2d_counts(act, w, stride, padding)
    return dots.astype(np.float32) * scale.values[None, :, None, None]


def compute_alpha(w) -> ScaleVector:
    """Mean absolute weight per output channel."""
    w = np.asarray(w)
    return ScaleVector(np.abs(w).reshape(w.shape[0], -1).mean(axis=1))
