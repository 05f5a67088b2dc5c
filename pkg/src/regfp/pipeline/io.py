"""Matrix and JSON persistence.

Two matrix encodings are supported: CSV (one row per line, optional header,
``NA`` for missing) and a binary format with a 16-byte header
(``b"DACCMAT1"``, little-endian u32 rows, u32 cols) followed by row-major
little-endian f64 values.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct

import numpy as np

from ..errors import InvalidInput

MAGIC = b"DACCMAT1"
NA = "NA"


def encode_binary(matrix) -> bytes:
    M = np.atleast_2d(np.asarray(matrix, dtype=float))
    if M.ndim != 2:
        raise InvalidInput("binary format holds 2-d matrices only")
    rows, cols = M.shape
    return MAGIC + struct.pack("<II", rows, cols) + M.astype("<f8").tobytes(order="C")


def decode_binary(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise InvalidInput("not a DACCMAT1 matrix")
    rows, cols = struct.unpack("<II", blob[8:16])
    body = blob[16:]
    if len(body) != 8 * rows * cols:
        raise InvalidInput(f"DACCMAT1 payload has {len(body)} bytes, expected {8 * rows * cols}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)


def _parse_cell(cell: str) -> float:
    cell = cell.strip()
    if cell == NA:
        return math.nan
    return float(cell)


def decode_csv(text: str) -> np.ndarray:
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise InvalidInput("empty CSV")
    try:
        [_parse_cell(c) for c in rows[0]]
    except ValueError:
        rows = rows[1:]  # header
    try:
        data = [[_parse_cell(c) for c in r] for r in rows]
    except ValueError as exc:
        raise InvalidInput(f"non-numeric CSV cell: {exc}") from exc
    widths = {len(r) for r in data}
    if len(widths) != 1:
        raise InvalidInput("ragged CSV rows")
    return np.array(data, dtype=float).reshape(len(data), widths.pop())


def _fmt(v: float) -> str:
    return NA if math.isnan(v) else repr(float(v))


def encode_csv(matrix, header=None) -> str:
    M = np.atleast_2d(np.asarray(matrix, dtype=float))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header is not None:
        w.writerow(header)
    for row in M:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] == MAGIC:
        return decode_binary(blob)
    return decode_csv(blob.decode())


def read_vector(path) -> np.ndarray:
    M = read_matrix(path)
    if 1 not in M.shape:
        raise InvalidInput(f"{path}: expected a vector, got shape {M.shape}")
    return M.ravel()


def write_matrix(path, matrix, header=None) -> str:
    """Write binary when ``path`` ends in ``.bin``, CSV otherwise."""
    if str(path).endswith(".bin"):
        with open(path, "wb") as fh:
            fh.write(encode_binary(matrix))
    else:
        with open(path, "w", newline="") as fh:
            fh.write(encode_csv(matrix, header))
    return str(path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> str:
    with open(path, "w") as fh:
        fh.write(dumps(obj))
    return str(path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
