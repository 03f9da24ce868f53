"""Binary checkpoint container.

Layout (little endian)::

    magic      8 bytes  b"ARATCKPT"
    version    uint32   1
    arch_len   uint32   then arch_len bytes of UTF-8 JSON (sorted keys)
    count      uint32   number of records
    record     name_len uint16, name (UTF-8), rank uint8, dims uint32 x rank,
               values float32 x prod(dims)

Records cover every parameter (both BN branches and all predictor heads)
and every BN running statistic, in the model's canonical order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import Arch, Model, init_model

MAGIC = b"ARATCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(model: Model) -> bytes:
    arch = json.dumps(model.arch.to_dict(), sort_keys=True).encode()
    arrays = model.state_arrays()
    parts = [MAGIC, struct.pack("<II", VERSION, len(arch)), arch, struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), value.ndim))
        parts.append(raw)
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.asarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, source):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (need {n} more)")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def decode(blob: bytes, source="<bytes>") -> tuple[Arch, dict[str, np.ndarray]]:
    r = _Reader(blob, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, arch_len = r.unpack("II")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        arch = Arch.from_dict(json.loads(r.take(arch_len).decode()))
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{source}: bad architecture descriptor: {exc}") from exc
    (count,) = r.unpack("I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, rank = r.unpack("HB")
        name = r.take(name_len).decode()
        dims = r.unpack(f"{rank}I") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float64)
    if r.pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - r.pos} trailing bytes")
    return arch, arrays


def save(model: Model, path) -> None:
    Path(path).write_bytes(encode(model))


def load(path) -> Model:
    arch, arrays = decode(Path(path).read_bytes(), path)
    # predictor heads in record order, so a reload re-encodes identically
    tags = list(dict.fromkeys(".".join(k.split(".")[1:3]) for k in arrays if k.startswith("predictor.")))
    model = init_model(arch, seed=0, predictor_tags=tags)
    try:
        model.load_arrays(arrays)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model
