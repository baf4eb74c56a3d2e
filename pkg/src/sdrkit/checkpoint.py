"""Binary checkpoint format for network weights.

Layout, all integers little-endian u32 unless noted:

    magic "SDRK" | version | config JSON length | config JSON (utf-8)
    | tensor count N
    | N records for the raw weights
    | N records for the EMA weights (same names, same order)

Each tensor record: name length | name utf-8 | rank | dims... | float32
little-endian payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError, UnsupportedFormatError
from .scorenet import ScoreNetParams

MAGIC = b"SDRK"
VERSION = 1


def _write_tensors(out: list, tensors: dict):
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        a = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _read_tensors(r: _Reader, count: int) -> dict:
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n_items = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * n_items)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
        tensors[name] = arr
    return tensors


def save_checkpoint(
    path, params: ScoreNetParams, ema_params: ScoreNetParams, config: dict
) -> None:
    if list(params.tensors.keys()) != list(ema_params.tensors.keys()):
        raise FormatError("raw and EMA tensor sets differ")
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    out.append(struct.pack("<I", len(params.tensors)))
    _write_tensors(out, params.tensors)
    _write_tensors(out, ema_params.tensors)
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_checkpoint(path):
    """Returns (params, ema_params, config dict)."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedFormatError(f"checkpoint version {version} not supported")
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    count = r.u32()
    params = ScoreNetParams(_read_tensors(r, count))
    ema = ScoreNetParams(_read_tensors(r, count))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after checkpoint payload")
    return params, ema, config
