"""Binary tensor files and checkpoints.

Tensor record: magic "CPXT", u32 rank, u32 extents (rank of them), then the
row-major little-endian float32 payload. A checkpoint is a single blob of
concatenated CPXT records plus a text manifest at ``<path>.manifest`` with
one line per entry:

    meta<TAB>key<TAB>value
    tensor<TAB>name<TAB>d0,d1,...<TAB>byte-offset

Writes are atomic (temp file then rename).
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"CPXT"


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim > 4:
        raise ValueError("CPXT supports rank <= 4")
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        f.write(struct.pack("<I", extent))
    f.write(arr.astype("<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    if rank > 4:
        raise ValueError(f"bad tensor rank {rank}")
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path: str, arr: np.ndarray) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        write_tensor(f, arr)
    os.replace(tmp, path)


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Write named tensors and metadata; insertion order is preserved."""
    lines = []
    for key, value in (meta or {}).items():
        lines.append(f"meta\t{key}\t{value}")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        for name, arr in tensors.items():
            offset = f.tell()
            write_tensor(f, arr)
            dims = ",".join(str(d) for d in np.asarray(arr).shape)
            lines.append(f"tensor\t{name}\t{dims}\t{offset}")
    os.replace(tmp, path)
    mtmp = path + ".manifest.tmp"
    with open(mtmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(mtmp, path + ".manifest")


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    with open(path + ".manifest") as f:
        manifest = [line.rstrip("\n") for line in f if line.strip()]
    with open(path, "rb") as blob:
        for line in manifest:
            parts = line.split("\t")
            if parts[0] == "meta":
                meta[parts[1]] = parts[2]
            elif parts[0] == "tensor":
                name, dims, offset = parts[1], parts[2], int(parts[3])
                blob.seek(offset)
                arr = read_tensor(blob)
                want = tuple(int(d) for d in dims.split(",") if d)
                if arr.shape != want:
                    raise ValueError(f"checkpoint entry {name!r} shape mismatch")
                tensors[name] = arr
            else:
                raise ValueError(f"bad manifest line: {line!r}")
    return tensors, meta
