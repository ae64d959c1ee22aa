"""Reading and writing tensors as LPT1 binary files or CSV.

LPT1 layout: the magic ``b"LPT1"``, a ``uint8`` rank, ``rank`` little-endian
``uint32`` dims, then the row-major data as little-endian ``float32``.

The CSV form holds one value per cell in row-major order and starts with a
``# dims=2,3`` comment line. Without that line the data is read as 1-D.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "TensorFileError", "read_tensor", "write_tensor", "read_lpt", "write_lpt",
           "read_csv_tensor", "write_csv_tensor", "lpt_data_section"]

MAGIC = b"LPT1"


class TensorFileError(ValueError):
    pass


def write_lpt(path, array) -> None:
    a = np.asarray(array, dtype="<f4")
    if a.ndim > 255 or any(d < 1 for d in a.shape):
        raise TensorFileError(f"cannot store shape {a.shape}: dims must be positive and rank <= 255")
    header = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(a).tobytes())


def _parse_lpt(blob: bytes) -> tuple[tuple[int, ...], int]:
    if blob[:4] != MAGIC:
        raise TensorFileError("missing LPT1 magic")
    if len(blob) < 5:
        raise TensorFileError("truncated header")
    rank = blob[4]
    end = 5 + 4 * rank
    if len(blob) < end:
        raise TensorFileError("truncated header")
    dims = struct.unpack(f"<{rank}I", blob[5:end])
    if any(d == 0 for d in dims):
        raise TensorFileError("dims must be positive")
    expected = end + 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise TensorFileError(f"data section has {len(blob) - end} bytes, dims {dims} need {expected - end}")
    return dims, end


def read_lpt(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    dims, start = _parse_lpt(blob)
    return np.frombuffer(blob, dtype="<f4", offset=start).astype(np.float64).reshape(dims)


def lpt_data_section(path) -> bytes:
    """Raw bytes of the data section, for file-level comparisons."""
    blob = Path(path).read_bytes()
    _, start = _parse_lpt(blob)
    return blob[start:]


def write_csv_tensor(path, array) -> None:
    a = np.asarray(array, dtype=np.float64)
    buf = io.StringIO()
    buf.write("# dims=" + ",".join(str(d) for d in a.shape) + "\n")
    row_len = a.shape[-1] if a.ndim else 1
    writer = csv.writer(buf, lineterminator="\n")
    for row in a.reshape(-1, row_len):
        writer.writerow(repr(float(v)) for v in row)
    Path(path).write_text(buf.getvalue())


def read_csv_tensor(path) -> np.ndarray:
    dims = None
    values: list[float] = []
    with open(path, newline="") as fh:
        for line in fh:
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                body = stripped.lstrip("#").strip()
                if body.startswith("dims="):
                    try:
                        dims = tuple(int(d) for d in body[5:].split(","))
                    except ValueError as exc:
                        raise TensorFileError(f"bad dims header {stripped!r}") from exc
                continue
            values.extend(float(cell) for cell in next(csv.reader([stripped])) if cell.strip())
    data = np.array(values, dtype=np.float64)
    if dims is None:
        return data
    if any(d < 1 for d in dims) or int(np.prod(dims)) != data.size:
        raise TensorFileError(f"dims {dims} do not match {data.size} values")
    return data.reshape(dims)


def read_tensor(path) -> np.ndarray:
    """Read LPT1 or CSV, sniffing the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_lpt(path) if head == MAGIC else read_csv_tensor(path)


def write_tensor(path, array) -> None:
    """Write CSV when ``path`` ends in ``.csv``, LPT1 otherwise."""
    if str(path).lower().endswith(".csv"):
        write_csv_tensor(path, array)
    else:
        write_lpt(path, array)
