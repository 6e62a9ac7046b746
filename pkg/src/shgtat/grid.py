"""Uniform tensor grids and second-order finite-difference operators.

Fields are plain numpy arrays of shape ``(ny, nx)``: axis 0 runs along y,
axis 1 along x, so ``f[j, i]`` is the value at ``(x0 + i*hx, y0 + j*hy)``.
Boundary traces are 1-D arrays over the outer ring of nodes, ordered
counter-clockwise starting at the corner ``(x0, y0)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Axis-aligned rectangle ``[x0, x0+lx] x [y0, y0+ly]`` with nodal samples."""

    nx: int
    ny: int
    x0: float = 0.0
    y0: float = 0.0
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs at least 3 nodes per axis, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("domain edge lengths must be positive")

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @cached_property
    def x(self) -> np.ndarray:
        return self.x0 + self.hx * np.arange(self.nx)

    @cached_property
    def y(self) -> np.ndarray:
        return self.y0 + self.hy * np.arange(self.ny)

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y = np.meshgrid(self.x, self.y, indexing="xy")
        X.flags.writeable = False
        Y.flags.writeable = False
        return X, Y

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
        m.flags.writeable = False
        return m

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @cached_property
    def boundary_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) index arrays of the boundary ring, counter-clockwise."""
        nx, ny = self.nx, self.ny
        rows = np.concatenate([
            np.zeros(nx, dtype=int),              # bottom, left to right
            np.arange(1, ny),                     # right, upward
            np.full(nx - 1, ny - 1),              # top, right to left
            np.arange(ny - 2, 0, -1),             # left, downward
        ])
        cols = np.concatenate([
            np.arange(nx),
            np.full(ny - 1, nx - 1),
            np.arange(nx - 2, -1, -1),
            np.zeros(ny - 2, dtype=int),
        ])
        return rows, cols

    @property
    def n_boundary(self) -> int:
        return 2 * (self.nx + self.ny) - 4

    @cached_property
    def boundary_flat(self) -> np.ndarray:
        r, c = self.boundary_index
        return np.ravel_multi_index((r, c), self.shape)

    @cached_property
    def interior_flat(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask.ravel())

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        """Outward normals at boundary nodes, shape ``(n_boundary, 2)``.

        Unit vectors on edges; at corners the mean of the two edge normals,
        so that ``normal_derivative(f)`` approximates ``n . grad f`` everywhere.
        """
        r, c = self.boundary_index
        nxv = np.where(c == self.nx - 1, 1.0, 0.0) - np.where(c == 0, 1.0, 0.0)
        nyv = np.where(r == self.ny - 1, 1.0, 0.0) - np.where(r == 0, 1.0, 0.0)
        n = np.stack([nxv, nyv], axis=1)
        corner = (nxv != 0) & (nyv != 0)
        n[corner] *= 0.5
        return n

    def trace(self, f: np.ndarray) -> np.ndarray:
        """Restrict a nodal field to the boundary ring."""
        return np.asarray(f)[self.boundary_index]

    def extend(self, trace: np.ndarray, fill=0.0) -> np.ndarray:
        """Place a boundary trace into a full field, ``fill`` elsewhere."""
        trace = np.asarray(trace)
        out = np.full(self.shape, fill, dtype=np.result_type(trace, type(fill)))
        out[self.boundary_index] = trace
        return out

    def evaluate(self, func) -> np.ndarray:
        """Sample ``func(x, y)`` at all nodes."""
        X, Y = self.mesh
        return np.broadcast_to(np.asarray(func(X, Y)), self.shape).copy()

    def evaluate_trace(self, func) -> np.ndarray:
        X, Y = self.mesh
        r, c = self.boundary_index
        return np.broadcast_to(np.asarray(func(X[r, c], Y[r, c])), (self.n_boundary,)).copy()

    def refine(self, factor: int) -> "Grid":
        if factor < 1:
            raise ValueError("refinement factor must be >= 1")
        return Grid((self.nx - 1) * factor + 1, (self.ny - 1) * factor + 1,
                    self.x0, self.y0, self.lx, self.ly)

    def restrict(self, fine_field: np.ndarray, factor: int) -> np.ndarray:
        """Injection from ``self.refine(factor)`` back onto this grid."""
        return np.asarray(fine_field)[::factor, ::factor].copy()

    def interior_band(self, width: int) -> np.ndarray:
        """Mask of nodes at least ``width`` nodes away from the boundary."""
        m = np.zeros(self.shape, dtype=bool)
        if 2 * width < min(self.nx, self.ny):
            m[width:self.ny - width, width:self.nx - width] = True
        return m


def _check_field(f, grid: Grid) -> np.ndarray:
    f = np.asarray(f)
    if f.shape != grid.shape:
        raise ValueError(f"field shape {f.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite values")
    return f


def _d1(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second-order first derivative: central inside, 3-point one-sided at the ends."""
    f = np.moveaxis(f, axis, 0)
    d = np.empty_like(f, dtype=np.result_type(f, float))
    d[1:-1] = (f[2:] - f[:-2]) / (2 * h)
    d[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
    d[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * h)
    return np.moveaxis(d, 0, axis)


def _d2(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second derivative: 3-point central inside, 4-point one-sided at the ends."""
    f = np.moveaxis(f, axis, 0)
    d = np.empty_like(f, dtype=np.result_type(f, float))
    d[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / h**2
    if f.shape[0] >= 4:
        d[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h**2
        d[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h**2
    else:
        d[0] = d[1]
        d[-1] = d[-2]
    return np.moveaxis(d, 0, axis)


def laplacian(f, grid: Grid) -> np.ndarray:
    """5-point Laplacian at interior nodes, one-sided second order on the boundary."""
    f = _check_field(f, grid)
    return _d2(f, grid.hx, axis=1) + _d2(f, grid.hy, axis=0)


def gradient(f, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    f = _check_field(f, grid)
    return _d1(f, grid.hx, axis=1), _d1(f, grid.hy, axis=0)


def divergence(wx, wy, grid: Grid) -> np.ndarray:
    wx = _check_field(wx, grid)
    wy = _check_field(wy, grid)
    return _d1(wx, grid.hx, axis=1) + _d1(wy, grid.hy, axis=0)


def normal_derivative(f, grid: Grid) -> np.ndarray:
    """Outward normal derivative on the boundary ring (3-point one-sided).

    Corner values are the mean of the two adjacent edge formulas.
    """
    f = _check_field(f, grid)
    if grid.nx < 4 or grid.ny < 4:
        raise ValueError("normal_derivative needs at least 4 nodes per axis")
    hx, hy = grid.hx, grid.hy
    dtype = np.result_type(f, float)
    left = (3 * f[:, 0] - 4 * f[:, 1] + f[:, 2]) / (2 * hx)
    right = (3 * f[:, -1] - 4 * f[:, -2] + f[:, -3]) / (2 * hx)
    bottom = (3 * f[0, :] - 4 * f[1, :] + f[2, :]) / (2 * hy)
    top = (3 * f[-1, :] - 4 * f[-2, :] + f[-3, :]) / (2 * hy)

    out = np.zeros(grid.shape, dtype=dtype)
    cnt = np.zeros(grid.shape)
    out[:, 0] += left
    cnt[:, 0] += 1
    out[:, -1] += right
    cnt[:, -1] += 1
    out[0, :] += bottom
    cnt[0, :] += 1
    out[-1, :] += top
    cnt[-1, :] += 1
    out[cnt > 0] /= cnt[cnt > 0]
    return grid.trace(out)


def normal_derivative_stencil(grid: Grid):
    """Sparse matrix ``D`` with ``D @ f.ravel() == normal_derivative(f)``."""
    import scipy.sparse as sp

    rows, cols, vals = [], [], []
    r, c = grid.boundary_index
    ny, nx = grid.shape
    hx, hy = grid.hx, grid.hy
    for b, (j, i) in enumerate(zip(r, c)):
        terms = []
        if i == 0:
            terms.append([((j, 0), 3 / (2 * hx)), ((j, 1), -4 / (2 * hx)), ((j, 2), 1 / (2 * hx))])
        if i == nx - 1:
            terms.append([((j, nx - 1), 3 / (2 * hx)), ((j, nx - 2), -4 / (2 * hx)), ((j, nx - 3), 1 / (2 * hx))])
        if j == 0:
            terms.append([((0, i), 3 / (2 * hy)), ((1, i), -4 / (2 * hy)), ((2, i), 1 / (2 * hy))])
        if j == ny - 1:
            terms.append([((ny - 1, i), 3 / (2 * hy)), ((ny - 2, i), -4 / (2 * hy)), ((ny - 3, i), 1 / (2 * hy))])
        w = 1.0 / len(terms)
        for t in terms:
            for (jj, ii), v in t:
                rows.append(b)
                cols.append(jj * nx + ii)
                vals.append(w * v)
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_boundary, grid.size))


def norm_l2(f, grid: Grid, mask=None) -> float:
    """Grid-weighted root-sum-square ``sqrt(hx*hy*sum|f|^2)``."""
    a = np.abs(np.asarray(f))
    if mask is not None:
        a = a[mask]
    return float(np.sqrt(grid.cell_area * np.sum(a**2)))


def norm_linf(f, mask=None) -> float:
    a = np.abs(np.asarray(f))
    if mask is not None:
        a = a[mask]
    return float(a.max()) if a.size else 0.0


def rel_l2(f, ref, grid: Grid, mask=None) -> float:
    f = np.asarray(f)
    ref = np.asarray(ref)
    if f.shape != ref.shape:
        raise ValueError("rel_l2 needs fields on matching grids")
    den = norm_l2(ref, grid, mask)
    if den == 0.0:
        raise ValueError("rel_l2 reference field is identically zero")
    return norm_l2(f - ref, grid, mask) / den


def norms(f, grid: Grid, ref=None, mask=None) -> dict:
    out = {"l2": norm_l2(f, grid, mask), "linf": norm_linf(f, mask)}
    if ref is not None:
        out["rel_l2"] = rel_l2(f, ref, grid, mask)
    return out
