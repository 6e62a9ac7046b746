"""FGRID v1 binary field files and CSV export.

Layout (little-endian): ``b"FGRD"``, version u32, nx u32, ny u32, dtype u8
(0 = float64, 1 = complex128), then x0, y0, lx, ly as float64, followed by
the node values in row-major order of the ``(ny, nx)`` array (x fastest).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import Grid

MAGIC = b"FGRD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIB4d")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}


def write_fgrid(path, values, grid: Grid) -> Path:
    values = np.asarray(values)
    if values.shape != grid.shape:
        raise ValueError(f"field shape {values.shape} does not match grid {grid.shape}")
    code = 1 if np.iscomplexobj(values) else 0
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, grid.nx, grid.ny, code,
                              grid.x0, grid.y0, grid.lx, grid.ly))
        fh.write(np.ascontiguousarray(values, dtype=_DTYPES[code]).tobytes())
    return path


def read_fgrid(path) -> tuple[np.ndarray, Grid]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated FGRID header")
    magic, version, nx, ny, code, x0, y0, lx, ly = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported FGRID version {version}")
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dt = _DTYPES[code]
    body = raw[_HEADER.size:]
    if len(body) != nx * ny * dt.itemsize:
        raise ValueError(f"{path}: expected {nx * ny} values, got {len(body) // dt.itemsize}")
    values = np.frombuffer(body, dtype=dt).reshape(ny, nx).astype(dt.newbyteorder("="))
    # 1 x m trace files are stored with ny = 1; Grid needs >= 3 nodes per axis
    if nx >= 3 and ny >= 3:
        grid = Grid(nx, ny, x0, y0, lx, ly)
    else:
        grid = None
    return values, grid


def write_trace(path, trace, grid: Grid) -> Path:
    """Store a boundary trace as a 1 x m FGRID field (ny = 1)."""
    trace = np.asarray(trace)
    if trace.shape != (grid.n_boundary,):
        raise ValueError("trace length does not match the grid's boundary ring")
    code = 1 if np.iscomplexobj(trace) else 0
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, trace.size, 1, code,
                              grid.x0, grid.y0, grid.lx, grid.ly))
        fh.write(np.ascontiguousarray(trace, dtype=_DTYPES[code]).tobytes())
    return path


def read_trace(path) -> np.ndarray:
    values, _ = read_fgrid(path)
    return values.ravel()


def write_csv(path, values, grid: Grid) -> Path:
    """One row per node: ``x, y, re`` and ``im`` for complex fields."""
    values = np.asarray(values)
    X, Y = grid.mesh
    cols = [X.ravel(), Y.ravel(), values.real.ravel()]
    header = "x,y,re"
    if np.iscomplexobj(values):
        cols.append(values.imag.ravel())
        header += ",im"
    path = Path(path)
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.17g")
    return path
