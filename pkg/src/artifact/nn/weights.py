"""ANW1 weight files.

Layout (all integers little-endian u32)::

    b"ANW1" | version | meta_len | meta (UTF-8 JSON, sorted keys) | count |
    count x (name_len | name | rank | dims[rank] | float32 payload)

Arrays are held as float64 in memory but always hold float32-representable
values after a load, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CorruptionError, FormatError

MAGIC = b"ANW1"
FORMAT_VERSION = 1
_MAX_RANK = 8


@dataclass
class ModelWeights:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def config_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.asarray(self.params[k].shape, dtype="<u4").tobytes())
        return h.hexdigest()[:16]


def to_bytes(w: ModelWeights) -> bytes:
    meta = json.dumps(w.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(w.params))]
    for name in sorted(w.params):
        arr = np.asarray(w.params[name])
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def from_bytes(data: bytes) -> ModelWeights:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not an ANW1 weight file (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CorruptionError(f"weight file truncated at byte {pos} (wanted {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported weight format version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        metadata = json.loads(take(meta_len).decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"metadata block unreadable: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError("entry name is not valid UTF-8") from None
        (rank,) = struct.unpack("<I", take(4))
        if rank > _MAX_RANK:
            raise CorruptionError(f"{name}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * size)
        if name in params:
            raise CorruptionError(f"duplicate entry {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    if pos != len(data):
        raise CorruptionError(f"{len(data) - pos} trailing bytes after last entry")
    return ModelWeights(params=params, metadata=metadata)


def save_weights(w: ModelWeights, path) -> None:
    Path(path).write_bytes(to_bytes(w))


def load_weights(path) -> ModelWeights:
    return from_bytes(Path(path).read_bytes())
