"""Flat binary parameter container.

Layout: magic ``DIL1``, then for each named array: name length (u64 LE),
UTF-8 name, rank (u64 LE), dims (u64 LE each), raw float32 LE values.
Entries run until end of file. Round-trips are bit-exact for float32
input arrays.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DIL1"


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, arr in entries.items():
            arr = np.asarray(arr, dtype="<f4", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    entries: dict[str, np.ndarray] = {}
    pos = 4

    def _u64() -> int:
        nonlocal pos
        if pos + 8 > len(blob):
            raise ValueError(f"truncated checkpoint: {path}")
        (v,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        return v

    while pos < len(blob):
        nlen = _u64()
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rank = _u64()
        dims = tuple(_u64() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        end = pos + 4 * count
        if end > len(blob):
            raise ValueError(f"truncated checkpoint: {path}")
        arr = np.frombuffer(blob[pos:end], dtype="<f4").reshape(dims).copy()
        pos = end
        if name in entries:
            raise ValueError(f"duplicate entry {name!r} in {path}")
        entries[name] = arr
    return entries
