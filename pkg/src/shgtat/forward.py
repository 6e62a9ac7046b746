"""Helmholtz solves and the second-harmonic forward models.

The fully coupled system is

    Δu + q1 u = -k² γ u* v,      u = g on ∂Ω
    Δv + q2 v = -4k² γ u²,       v = h on ∂Ω

with q1 = k²(1+η) + ikσ and q2 = 4k²(1+η) + 2ikσ. The one-way variant
drops the right-hand side of the u-equation and closes the v-equation with
the Robin condition v + 2ik ∂v/∂ν = 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid, normal_derivative_stencil
from .phantoms import AdmissibilityError, check_bounds

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Linear solver breakdown or a residual above tolerance."""


class DivergenceError(SolverError):
    """The coupled fixed-point iteration failed to converge."""

    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass
class MediumSet:
    """Coefficients (Γ, η, σ, γ) on a grid with admissible box ``[c1, c2]``.

    ``chi2_lower`` relaxes the lower bound for γ alone (0 lets γ vanish
    outside inclusions). ``override`` disables all bound checks and exists
    for decoupled and non-absorbing test oracles only.
    """

    grid: Grid
    gamma_g: np.ndarray
    eta: np.ndarray
    sigma: np.ndarray
    chi2: np.ndarray
    bounds: tuple[float, float] = (0.05, 5.0)
    chi2_lower: float | None = None
    override: bool = False

    def __post_init__(self):
        for name in ("gamma_g", "eta", "sigma", "chi2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape == ():
                arr = np.full(self.grid.shape, float(arr))
            if arr.shape != self.grid.shape:
                raise ValueError(f"{name} has shape {arr.shape}, grid is {self.grid.shape}")
            setattr(self, name, arr)
        c1, c2 = self.bounds
        if not (0 < c1 <= c2):
            raise ValueError("bounds must satisfy 0 < c1 <= c2")
        self.check()

    def check(self) -> None:
        if self.override:
            return
        c1, c2 = self.bounds
        check_bounds("gamma_g", self.gamma_g, c1, c2)
        check_bounds("eta", self.eta, c1, c2)
        check_bounds("sigma", self.sigma, c1, c2)
        lo = c1 if self.chi2_lower is None else self.chi2_lower
        check_bounds("chi2", self.chi2, lo, c2)

    def replace(self, **fields) -> "MediumSet":
        kw = dict(grid=self.grid, gamma_g=self.gamma_g, eta=self.eta, sigma=self.sigma,
                  chi2=self.chi2, bounds=self.bounds, chi2_lower=self.chi2_lower,
                  override=self.override)
        kw.update(fields)
        return MediumSet(**kw)

    def resample(self, grid: Grid) -> "MediumSet":
        """Bilinear interpolation of every coefficient onto ``grid``."""
        from scipy.interpolate import RegularGridInterpolator

        X, Y = grid.mesh
        pts = np.column_stack([Y.ravel(), X.ravel()])
        out = {}
        for name in ("gamma_g", "eta", "sigma", "chi2"):
            interp = RegularGridInterpolator((self.grid.y, self.grid.x), getattr(self, name))
            out[name] = interp(pts).reshape(grid.shape)
        return MediumSet(grid, bounds=self.bounds, chi2_lower=self.chi2_lower,
                         override=self.override, **out)


def potentials(media: MediumSet, k: float) -> tuple[np.ndarray, np.ndarray]:
    """q1 = k²(1+η) + ikσ and q2 = 4k²(1+η) + 2ikσ."""
    if not k > 0:
        raise ValueError("wavenumber k must be positive")
    media.check()
    if not media.override and np.any(media.sigma <= 0):
        raise AdmissibilityError("sigma must be positive so that Im q > 0")
    q1 = k**2 * (1 + media.eta) + 1j * k * media.sigma
    q2 = 4 * k**2 * (1 + media.eta) + 2j * k * media.sigma
    return q1, q2


@dataclass(frozen=True)
class BCSpec:
    """Boundary condition for a scalar solve.

    ``kind="dirichlet"`` imposes ``w = values``; ``kind="robin"`` imposes
    ``w + i*m*k*dw/dν = values`` (``values`` defaults to zero).
    """

    kind: str = "dirichlet"
    values: np.ndarray | None = None
    multiplier: float = 2.0

    def __post_init__(self):
        if self.kind not in ("dirichlet", "robin"):
            raise ValueError(f"unknown boundary condition {self.kind!r}")

    @classmethod
    def dirichlet(cls, g):
        return cls("dirichlet", None if g is None else np.asarray(g))

    @classmethod
    def robin_zero(cls, multiplier=2.0):
        return cls("robin", None, multiplier)


def _laplacian_matrix(grid: Grid) -> sp.csr_matrix:
    """5-point Laplacian rows at interior nodes, zero rows on the boundary."""
    ny, nx = grid.shape
    idx = np.arange(grid.size).reshape(grid.shape)
    inner = idx[1:-1, 1:-1].ravel()
    cx, cy = 1.0 / grid.hx**2, 1.0 / grid.hy**2
    rows = np.concatenate([inner] * 5)
    cols = np.concatenate([inner, inner - 1, inner + 1, inner - nx, inner + nx])
    vals = np.concatenate([np.full(inner.size, -2 * (cx + cy)), np.full(inner.size, cx),
                           np.full(inner.size, cx), np.full(inner.size, cy), np.full(inner.size, cy)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.size, grid.size))


_LAP_CACHE: dict = {}
_DNU_CACHE: dict = {}


def laplacian_matrix(grid: Grid) -> sp.csr_matrix:
    if grid not in _LAP_CACHE:
        _LAP_CACHE[grid] = _laplacian_matrix(grid)
    return _LAP_CACHE[grid]


def normal_matrix(grid: Grid) -> sp.csr_matrix:
    if grid not in _DNU_CACHE:
        _DNU_CACHE[grid] = normal_derivative_stencil(grid)
    return _DNU_CACHE[grid]


def assemble_helmholtz(q, grid: Grid, bc: BCSpec, k: float | None = None) -> sp.csc_matrix:
    """Sparse matrix of Δ_h + q (interior rows) with boundary-condition rows."""
    q = np.asarray(q)
    n = grid.size
    interior = np.zeros(n)
    interior[grid.interior_flat] = 1.0
    A = laplacian_matrix(grid) + sp.diags(interior * q.ravel())
    bnd = grid.boundary_flat
    B = sp.csr_matrix((np.ones(bnd.size), (bnd, bnd)), shape=(n, n))
    if bc.kind == "robin":
        if k is None:
            raise ValueError("Robin condition needs the wavenumber")
        D = normal_matrix(grid).tocoo()
        B = B + sp.csr_matrix((1j * bc.multiplier * k * D.data, (bnd[D.row], D.col)), shape=(n, n))
    return (A + B).tocsc().astype(complex)


class HelmholtzOperator:
    """Factorized discrete operator for Δ_h w + q w = f with fixed BC type.

    One factorization serves any number of right-hand sides and the
    transposed (adjoint) solves.
    """

    def __init__(self, q, grid: Grid, bc: BCSpec = BCSpec(), k: float | None = None,
                 allow_nonabsorbing: bool = False):
        q = np.asarray(q, dtype=complex)
        if q.shape != grid.shape:
            raise ValueError("potential shape does not match grid")
        if not allow_nonabsorbing and np.any(q.imag[grid.interior_mask] <= 0):
            raise AdmissibilityError("Im q must be positive at interior nodes")
        self.grid, self.q, self.bc, self.k = grid, q, bc, k
        self.matrix = assemble_helmholtz(q, grid, bc, k)
        self._lu = None

    @property
    def lu(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.matrix)
            except RuntimeError as exc:
                raise SolverError(f"factorization failed: {exc}") from exc
        return self._lu

    def rhs(self, f, bc_values=None) -> np.ndarray:
        grid = self.grid
        b = np.zeros(grid.size, dtype=complex)
        if f is not None:
            b[grid.interior_flat] = np.asarray(f, dtype=complex).ravel()[grid.interior_flat]
        if bc_values is not None:
            b[grid.boundary_flat] = np.asarray(bc_values, dtype=complex)
        return b

    def solve_vector(self, b: np.ndarray) -> np.ndarray:
        x = self.lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SolverError("linear solve produced non-finite values")
        return x

    def solve(self, f=None, bc_values=None, r_tol: float | None = 1e-8) -> np.ndarray:
        b = self.rhs(f, bc_values)
        u = self.solve_vector(b).reshape(self.grid.shape)
        if r_tol is not None:
            res = self.interior_residual(u, f)
            scale = (np.abs(b[self.grid.interior_flat]).max(initial=0.0)
                     + np.abs(b[self.grid.boundary_flat]).max(initial=0.0))
            if res > r_tol * max(scale, np.finfo(float).tiny):
                raise SolverError(f"residual {res:.3e} above tolerance (scale {scale:.3e})")
        return u

    def solve_transpose(self, b: np.ndarray) -> np.ndarray:
        """Solve ``A^T x = b`` with the stored factorization."""
        return self.lu.solve(np.asarray(b, dtype=complex), trans="T")

    def apply(self, u) -> np.ndarray:
        return (self.matrix @ np.asarray(u, dtype=complex).ravel()).reshape(self.grid.shape)

    def interior_residual(self, u, f) -> float:
        r = self.apply(u)
        if f is not None:
            r = r - np.asarray(f)
        return float(np.abs(r[self.grid.interior_mask]).max(initial=0.0))


def solve_scalar(q, f, bc: BCSpec, grid: Grid, k: float | None = None,
                 r_tol: float = 1e-8, allow_nonabsorbing: bool = False) -> np.ndarray:
    """Solve Δ_h u + q u = f with a Dirichlet or Robin boundary condition."""
    op = HelmholtzOperator(q, grid, bc, k, allow_nonabsorbing=allow_nonabsorbing)
    return op.solve(f, bc.values, r_tol=r_tol)


@dataclass
class SHGSolution:
    u: np.ndarray
    v: np.ndarray
    iterations: int = 1
    final_update_norm: float = 0.0
    history: list = field(default_factory=list)
    stagnated: bool = False

    @property
    def contraction_ratios(self) -> np.ndarray:
        h = np.asarray(self.history, dtype=float)
        if h.size < 2:
            return np.array([])
        with np.errstate(divide="ignore", invalid="ignore"):
            return h[1:] / h[:-1]

    def iterations_to(self, rel_tol: float) -> int:
        """First iteration whose update is below ``rel_tol`` times the first update."""
        h = np.asarray(self.history, dtype=float)
        hit = np.flatnonzero(h <= rel_tol * h[0]) if h.size else np.array([])
        return int(hit[0]) + 1 if hit.size else len(h)

    def contraction_ratio(self) -> float:
        """Geometric-mean ratio of successive updates above the rounding floor."""
        h = np.asarray(self.history, dtype=float)
        if h.size < 3 or h[1] == 0:
            return 0.0
        tail = h[1:]
        above = np.flatnonzero(tail < 1e3 * tail.min())
        stop = max(int(above[0]) if above.size else tail.size, 2)
        seg = tail[:stop]
        return float(np.exp(np.mean(np.diff(np.log(seg)))))


@dataclass
class CoupledOptions:
    fp_tol: float = 1e-12
    max_iter: int = 200
    res_tol: float = 1e-10
    small_data_cap: float = 0.1
    stall_window: int = 10


def solve_coupled(media: MediumSet, k: float, g, h, opts: CoupledOptions | None = None,
                  operators=None) -> SHGSolution:
    """Picard iteration of the fully coupled system starting from (0, 0).

    Each step solves the two decoupled Dirichlet problems with sources
    ``-k²γ u* v`` and ``-4k²γ u²`` built from the previous iterate.
    """
    opts = opts or CoupledOptions()
    grid = media.grid
    g = np.asarray(g, dtype=complex)
    h = np.zeros(grid.n_boundary, complex) if h is None else np.asarray(h, dtype=complex)
    gmax = max(np.abs(g).max(initial=0.0), np.abs(h).max(initial=0.0))
    if gmax > opts.small_data_cap * (1 + 1e-12):
        raise ValueError(f"boundary data sup-norm {gmax:.3g} exceeds small_data_cap {opts.small_data_cap}")
    if operators is None:
        q1, q2 = potentials(media, k)
        operators = (HelmholtzOperator(q1, grid, allow_nonabsorbing=media.override),
                     HelmholtzOperator(q2, grid, allow_nonabsorbing=media.override))
    op1, op2 = operators
    chi = media.chi2
    u = np.zeros(grid.shape, complex)
    v = np.zeros(grid.shape, complex)
    history = []
    best, since_best = np.inf, 0
    stagnated = False
    for it in range(1, opts.max_iter + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                u_new = op1.solve(-k**2 * chi * np.conj(u) * v, g, r_tol=None)
                v_new = op2.solve(-4 * k**2 * chi * u**2, h, r_tol=None)
        except SolverError as exc:
            raise DivergenceError(f"iterates overflowed at iteration {it}", history) from exc
        upd = max(np.abs(u_new - u).max(), np.abs(v_new - v).max())
        scale = max(np.abs(u_new).max(), np.abs(v_new).max())
        u, v = u_new, v_new
        history.append(upd)
        logger.debug("picard %d: update %.3e", it, upd)
        if upd <= opts.fp_tol * scale or upd == 0.0:
            break
        if upd < best:
            best, since_best = upd, 0
        else:
            since_best += 1
        if since_best >= opts.stall_window:
            # a stall at the rounding floor is convergence if the equations hold
            ru, rv = residuals(SHGSolution(u, v), media, k, g, h, operators=operators)
            if max(ru, rv) <= opts.res_tol:
                stagnated = True
                break
            raise DivergenceError(f"update norm stopped decreasing at iteration {it}", history)
    else:
        raise DivergenceError(f"no convergence in {opts.max_iter} iterations", history)

    sol = SHGSolution(u, v, it, history[-1], history, stagnated)
    ru, rv = residuals(sol, media, k, g, h, model="coupled", operators=operators)
    if max(ru, rv) > opts.res_tol:
        raise SolverError(f"coupled residuals ({ru:.3e}, {rv:.3e}) above res_tol {opts.res_tol}")
    return sol


def solve_one_way(media: MediumSet, k: float, g, v_bc: str = "robin", operators=None) -> SHGSolution:
    """One-way model: u from the linear Dirichlet problem, then v with source -4k²γu².

    ``v_bc="dirichlet"`` swaps the Robin closure for v = 0, which is the
    variant comparable with second-order linearization.
    """
    grid = media.grid
    if operators is None:
        operators = one_way_operators(media, k, v_bc)
    op1, op2 = operators
    u = op1.solve(None, np.asarray(g, dtype=complex))
    v = op2.solve(-4 * k**2 * media.chi2 * u**2, None)
    return SHGSolution(u, v, 1, 0.0, [])


def one_way_operators(media: MediumSet, k: float, v_bc: str = "robin"):
    q1, q2 = potentials(media, k)
    grid = media.grid
    op1 = HelmholtzOperator(q1, grid, allow_nonabsorbing=media.override)
    bc = BCSpec.robin_zero(2.0) if v_bc == "robin" else BCSpec()
    op2 = HelmholtzOperator(q2, grid, bc, k, allow_nonabsorbing=media.override)
    return op1, op2


def residuals(sol: SHGSolution, media: MediumSet, k: float, g=None, h=None,
              model: str = "coupled", operators=None) -> tuple[float, float]:
    """Interior sup-norm residuals of the two discrete equations."""
    if operators is None:
        q1, q2 = potentials(media, k)
        grid = media.grid
        op1 = HelmholtzOperator(q1, grid, allow_nonabsorbing=True)
        op2 = HelmholtzOperator(q2, grid, allow_nonabsorbing=True)
    else:
        op1, op2 = operators
    chi = media.chi2
    fu = -k**2 * chi * np.conj(sol.u) * sol.v if model == "coupled" else np.zeros_like(sol.u)
    fv = -4 * k**2 * chi * sol.u**2
    return op1.interior_residual(sol.u, fu), op2.interior_residual(sol.v, fv)
