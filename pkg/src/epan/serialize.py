"""Binary tensor dumps and checkpoint files.

One tensor record is: magic bytes ``EPTN``, u32 rank, one u64 per dimension,
then the row-major payload as little-endian f64. A checkpoint is a sequence
of records in one ``.eptn`` file plus a plain-text manifest (``.eptn.idx``)
with one ``name<TAB>shape<TAB>byte_offset`` line per record.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"EPTN"
INDEX_SUFFIX = ".idx"


def write_tensor(fh, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    fh.write(MAGIC)
    fh.write(np.uint32(arr.ndim).astype("<u4").tobytes())
    fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    offset = fh.tell()
    magic = fh.read(4)
    if magic != MAGIC:
        raise DataFormatError(
            f"bad tensor magic {magic!r} at byte {offset} (expected {MAGIC!r})"
        )
    rank_bytes = fh.read(4)
    if len(rank_bytes) != 4:
        raise DataFormatError(f"truncated tensor rank at byte {offset + 4}")
    rank = int(np.frombuffer(rank_bytes, dtype="<u4")[0])
    if rank > 32:
        raise DataFormatError(f"implausible tensor rank {rank} at byte {offset + 4}")
    dims_bytes = fh.read(8 * rank)
    if len(dims_bytes) != 8 * rank:
        raise DataFormatError(f"truncated tensor dims at byte {offset + 8}")
    shape = tuple(int(d) for d in np.frombuffer(dims_bytes, dtype="<u8"))
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise DataFormatError(f"truncated tensor payload at byte {fh.tell()}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def dump_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors to ``path`` plus a ``path + '.idx'`` manifest."""
    path = Path(path)
    lines = []
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            offset = fh.tell()
            arr = np.asarray(arr)
            shape = "x".join(str(d) for d in arr.shape) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}\n")
            write_tensor(fh, arr)
    with open(path.with_name(path.name + INDEX_SUFFIX), "w") as fh:
        fh.writelines(lines)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as an ordered name -> float64 array mapping."""
    path = Path(path)
    index = path.with_name(path.name + INDEX_SUFFIX)
    if not index.exists():
        raise DataFormatError(f"missing checkpoint manifest {index}")
    out: dict[str, np.ndarray] = {}
    data = open(path, "rb").read()
    fh = io.BytesIO(data)
    for lineno, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, shape_txt, offset_txt = line.split("\t")
            offset = int(offset_txt)
        except ValueError as exc:
            raise DataFormatError(f"{index}:{lineno}: bad manifest line") from exc
        fh.seek(offset)
        arr = read_tensor(fh)
        declared = tuple() if shape_txt == "scalar" else tuple(
            int(d) for d in shape_txt.split("x")
        )
        if arr.shape != declared:
            raise DataFormatError(
                f"{index}:{lineno}: manifest shape {declared} != stored {arr.shape}"
            )
        out[name] = arr
    return out
