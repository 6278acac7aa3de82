"""CNDK tensor container.

Layout (all little-endian)::

    b"CNDK" | version u32 | count u32 | count x record        # parameter section
    [ b"OPTS" | count u32 | count x record ]                  # optional optimizer section

    record = name_len u16 | utf-8 name | dtype u8 (0 = f32) | rank u8 | dims u32[rank] | f32 payload
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptData

MAGIC = b"CNDK"
OPT_TAG = b"OPTS"
VERSION = 1
DTYPE_F32 = 0


def _write_records(buf, tensors: dict[str, np.ndarray]):
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")  # tobytes() below is C-ordered; keeps rank 0
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError("tensor rank exceeds 255")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def encode(tensors: dict[str, np.ndarray], opt_state: dict[str, np.ndarray] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_records(buf, tensors)
    if opt_state is not None:
        buf.write(OPT_TAG)
        _write_records(buf, opt_state)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptData("truncated checkpoint", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_records(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        dtype, rank = r.unpack("<BB")
        if dtype != DTYPE_F32:
            raise CorruptData(f"unsupported dtype tag {dtype} for {name!r}", r.pos)
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = arr
    return out


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray] | None]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptData("bad magic, not a CNDK container", 0)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CorruptData(f"unsupported CNDK version {version}", 4)
    tensors = _read_records(r)
    opt = None
    if r.pos < len(data):
        if r.take(4) != OPT_TAG:
            raise CorruptData("unknown section tag", r.pos - 4)
        opt = _read_records(r)
    if r.pos != len(data):
        raise CorruptData("trailing bytes after last section", r.pos)
    return tensors, opt


def save(path, tensors, opt_state=None, sidecar: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors, opt_state))
    if sidecar is not None:
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load(path):
    return decode(Path(path).read_bytes())


def load_sidecar(path) -> dict:
    return json.loads(sidecar_path(Path(path)).read_text())


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")
