"""EULF binary field snapshots and small CSV helpers."""

from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ArgumentError

MAGIC = b"EULF"
VERSION = 1
_HEADER = struct.Struct("<4sI3I2d")


def write_snapshot(path, t: float, h: float, rho: np.ndarray, j: np.ndarray) -> None:
    """Header (magic, version u32, n per axis u32 x3, h f64, t f64), then rho, jx, jy, jz.

    Arrays are little-endian float64 in x-fastest (Fortran) order.
    """
    rho = np.asarray(rho, "<f8")
    j = np.asarray(j, "<f8")
    if j.shape != (3,) + rho.shape:
        raise ArgumentError("momentum must have shape (3,) + density shape")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, *rho.shape, float(h), float(t)))
        fh.write(rho.tobytes(order="F"))
        for c in range(3):
            fh.write(j[c].tobytes(order="F"))


def read_snapshot(path):
    """Returns ``(t, h, rho, j)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ArgumentError(f"{path}: truncated snapshot")
    magic, version, nx, ny, nz, h, t = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ArgumentError(f"{path}: not an EULF snapshot")
    if version != VERSION:
        raise ArgumentError(f"{path}: unsupported snapshot version {version}")
    n = nx * ny * nz
    body = np.frombuffer(data, "<f8", offset=_HEADER.size)
    if body.size != 4 * n:
        raise ArgumentError(f"{path}: expected {4 * n} values, found {body.size}")
    shape = (nx, ny, nz)
    rho = body[:n].reshape(shape, order="F").astype(float)
    j = np.stack([body[(c + 1) * n:(c + 2) * n].reshape(shape, order="F") for c in range(3)]).astype(float)
    return t, h, rho, j


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
