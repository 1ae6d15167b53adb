"""Matrix and label files: CSV (optional header) or NPY format version 1.0."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from numpy.lib import format as npy_format

from .errors import InputError

FLOAT_DTYPES = {np.dtype("<f4"), np.dtype("<f8")}
INT_DTYPES = {np.dtype(t) for t in ("<i8", "<i4", "<i2", "|i1", "<u4", "<u2", "|u1")}


def _read_npy(path: Path, allowed: set, what: str) -> np.ndarray:
    with open(path, "rb") as f:
        try:
            version = npy_format.read_magic(f)
        except ValueError as e:
            raise InputError(f"{path}: bad NPY magic string at byte 0 ({e})") from None
        if version != (1, 0):
            raise InputError(f"{path}: NPY format version {version[0]}.{version[1]} is not supported (only 1.0)")
        try:
            shape, fortran, dtype = npy_format.read_array_header_1_0(f)
        except ValueError as e:
            raise InputError(f"{path}: malformed NPY header at byte 10 ({e})") from None
        if fortran:
            raise InputError(f"{path}: Fortran-ordered arrays are not supported")
        if dtype not in allowed:
            raise InputError(f"{path}: unsupported {what} dtype {dtype.str}")
        offset = f.tell()
        count = int(np.prod(shape)) if shape else 1
        data = f.read()
    need = count * dtype.itemsize
    if len(data) < need:
        raise InputError(f"{path}: truncated data, expected {need} bytes after byte {offset}, found {len(data)}")
    return np.frombuffer(data[:need], dtype=dtype).reshape(shape)


def _read_csv_rows(path: Path) -> list[list[str]]:
    with open(path, newline="") as f:
        return [row for row in csv.reader(f) if row and any(c.strip() for c in row)]


def _parse_float(v: str) -> float:
    return float(v.strip())


def load_matrix(path) -> np.ndarray:
    """N x C float64 matrix from CSV or NPY (float32/float64, little-endian)."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        a = _read_npy(path, FLOAT_DTYPES, "matrix")
        if a.ndim != 2:
            raise InputError(f"{path}: expected a 2-d array, got shape {a.shape}")
    else:
        rows = _read_csv_rows(path)
        if rows:
            try:
                [_parse_float(v) for v in rows[0]]
            except ValueError:
                rows = rows[1:]  # header
        width = len(rows[0]) if rows else 0
        vals = []
        for i, row in enumerate(rows):
            if len(row) != width:
                raise InputError(f"{path}: ragged row {i + 1} has {len(row)} fields, expected {width}")
            try:
                vals.append([_parse_float(v) for v in row])
            except ValueError:
                raise InputError(f"{path}: non-numeric value in row {i + 1}") from None
        a = np.array(vals, dtype=np.float64).reshape(len(vals), width)
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise InputError(f"{path}: empty dataset (shape {a.shape})")
    return np.array(a, dtype=np.float64)


def load_labels(path, num_classes: int | None = None) -> np.ndarray:
    """Integer labels from a single-column CSV or a 1-d integer NPY."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        a = _read_npy(path, INT_DTYPES, "label")
        if a.ndim != 1:
            raise InputError(f"{path}: labels must be a 1-d array, got shape {a.shape}")
        y = a.astype(np.int64)
    else:
        rows = _read_csv_rows(path)
        if rows:
            try:
                int(rows[0][0])
            except ValueError:
                rows = rows[1:]
        out = []
        for i, row in enumerate(rows):
            if len(row) != 1:
                raise InputError(f"{path}: row {i + 1} has {len(row)} fields, expected 1")
            try:
                out.append(int(row[0].strip()))
            except ValueError:
                raise InputError(f"{path}: non-integer label in row {i + 1}") from None
        y = np.array(out, dtype=np.int64)
    if y.size == 0:
        raise InputError(f"{path}: no labels")
    if num_classes is not None:
        bad = np.flatnonzero((y < 0) | (y >= num_classes))
        if bad.size:
            raise InputError(f"{path}: label {y[bad[0]]} out of range [0, {num_classes}) at row {bad[0]}")
    return y


def save_array(path, a) -> Path:
    """Write by suffix: ``.npy`` (format 1.0) or ``.csv`` (round-trip exact decimals)."""
    path = Path(path)
    a = np.asarray(a)
    if path.suffix.lower() == ".npy":
        with open(path, "wb") as f:
            npy_format.write_array(f, np.ascontiguousarray(a), version=(1, 0), allow_pickle=False)
        return path
    rows = a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(-1, 1)
    if np.issubdtype(a.dtype, np.integer):
        lines = [",".join(str(int(v)) for v in r) for r in rows]
    else:
        lines = [",".join(repr(float(v)) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_vector(path) -> np.ndarray:
    """1-d float vector (e.g. scores) from CSV or NPY."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        a = _read_npy(path, FLOAT_DTYPES, "vector").astype(np.float64)
        return a.reshape(-1)
    m = load_matrix(path)
    if m.shape[1] != 1:
        raise InputError(f"{path}: expected one column, found {m.shape[1]}")
    return m[:, 0]
