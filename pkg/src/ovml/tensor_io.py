"""Binary tensor files and checkpoint directories.

Tensor file layout: magic "MKT1" (4 bytes), u8 rank, rank u64
little-endian extents, then the row-major IEEE-754 f64 payload.

A checkpoint is a directory holding one tensor file per parameter plus
a manifest: text lines "name<TAB>filename".
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MKT1"
MANIFEST = "manifest.txt"


class BadTensorFile(ValueError):
    pass


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    # asarray, not ascontiguousarray: the latter silently promotes 0-d to 1-d
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim > 255:
        raise BadTensorFile(f"rank {arr.ndim} exceeds format limit")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise BadTensorFile(f"{path}: bad magic {blob[:4]!r}")
    rank = blob[4]
    header_end = 5 + 8 * rank
    shape = struct.unpack(f"<{rank}Q", blob[5:header_end])
    count = int(np.prod(shape)) if rank else 1
    payload = blob[header_end:]
    if len(payload) != 8 * count:
        raise BadTensorFile(f"{path}: payload holds {len(payload)} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8", count=count).reshape(shape).copy()


def save_checkpoint(directory: str | Path, tensors: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        fname = name.replace("/", "_") + ".mkt1"
        write_tensor(directory / fname, tensors[name])
        lines.append(f"{name}\t{fname}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")


def directory_digest(directory: str | Path) -> str:
    """Order-independent content hash of every file under a directory."""
    directory = Path(directory)
    h = hashlib.sha256()
    for rel in sorted(
        str(p.relative_to(directory)).replace("\\", "/")
        for p in directory.rglob("*")
        if p.is_file()
    ):
        h.update(rel.encode())
        h.update(hashlib.sha256((directory / rel).read_bytes()).digest())
    return h.hexdigest()


def load_checkpoint(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    out: dict[str, np.ndarray] = {}
    for line in (directory / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, fname = line.split("\t")
        out[name] = read_tensor(directory / fname)
    return out
