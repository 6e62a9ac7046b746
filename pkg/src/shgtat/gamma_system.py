"""Recovery of the SHG susceptibility γ from third-order data.

With ``g2 = h2 = 0`` the second-order fields solve

    (Δ + q1) u2 = -2k²γ u1* v1,    (Δ + q2) v2 = -8k²γ u1²,

vanish on the boundary, and the data give

    u1* u2 + u1 u2* + v1* v2 + v1 v2* = H3 / (3Γσ)

inside together with the Neumann traces of u2 and v2. Treating
(Re u2, Im u2, Re v2, Im v2, γ) as real unknowns turns these relations into
one sparse linear least-squares problem.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize_scalar
from sklearn.base import BaseEstimator, clone

from .forward import SolverError, laplacian_matrix, normal_matrix
from .grid import Grid, laplacian
from .validation import check_complex_field, check_is_fitted, check_real_field, check_trace


class EllipticityError(SolverError):
    """The illumination does not make the γ system elliptic."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class EllipticityReport:
    margin: np.ndarray
    min_margin: float
    mask: np.ndarray
    floor: float

    @property
    def passed(self) -> bool:
        return bool(self.min_margin > self.floor)


def check_ellipticity(u1, v1, floor: float = 1e-3, rel_mask: float = 1e-8) -> EllipticityReport:
    """Margin |u1²/(u1*)² + v1/v1*| of the principal symbol, nodewise.

    Nodes where |u1| or |v1| is below ``rel_mask`` times its maximum are
    masked (NaN in the margin field).
    """
    u1 = np.asarray(u1, dtype=complex)
    v1 = np.asarray(v1, dtype=complex)
    if u1.shape != v1.shape:
        raise ValueError("u1 and v1 must share a shape")
    au, av = np.abs(u1), np.abs(v1)
    mask = (au > rel_mask * au.max(initial=0.0)) & (av > rel_mask * av.max(initial=0.0))
    if not mask.any():
        raise ValueError("every node is masked: u1 or v1 vanishes identically")
    su = np.where(mask, u1, 1.0)
    sv = np.where(mask, v1, 1.0)
    margin = np.where(mask, np.abs(su**2 / np.conj(su) ** 2 + sv / np.conj(sv)), np.nan)
    return EllipticityReport(margin, float(np.nanmin(margin)), mask, floor)


def best_phase(u1, v1, n_grid: int = 720) -> tuple[float, float]:
    """Phase φ maximizing the minimum margin after ``v1 -> e^{iφ} v1``.

    Rotating h1 by e^{iφ} rotates v1 by the same factor (the v-problem is
    linear in h1), so no re-solve is needed. Returns ``(phi, min_margin)``.
    """
    rep = check_ellipticity(u1, v1)
    m = rep.mask
    a = (u1[m] / np.conj(u1[m])) ** 2
    b = v1[m] / np.conj(v1[m])

    def neg_min(phi):
        return -np.abs(a + np.exp(2j * phi) * b).min()

    phis = np.linspace(0.0, np.pi, n_grid, endpoint=False)
    vals = np.array([neg_min(p) for p in phis])
    p0 = phis[vals.argmin()]
    step = np.pi / n_grid
    res = minimize_scalar(neg_min, bounds=(p0 - step, p0 + step), method="bounded",
                          options={"xatol": 1e-10})
    phi, best = (res.x, -res.fun) if res.fun <= vals.min() else (p0, -vals.min())
    return float(np.mod(phi, 2 * np.pi)), float(best)


def rotate_for_ellipticity(h1, u1, v1, target: float = 0.5):
    """Phase-rotate the trace h1 (and v1) to reach a margin of at least ``target``.

    Returns ``(h1_rot, v1_rot, phi, report)``; raises :class:`EllipticityError`
    when no phase reaches the target.
    """
    phi, best = best_phase(u1, v1)
    rot = np.exp(1j * phi)
    v1r = rot * np.asarray(v1)
    rep = check_ellipticity(u1, v1r, floor=target)
    if rep.min_margin < target:
        raise EllipticityError(f"best phase reaches margin {best:.3g} < {target}", rep)
    return rot * np.asarray(h1), v1r, phi, rep


# ---------------------------------------------------------------------------
# assembly

@dataclass
class GammaSystemInput:
    grid: Grid
    k: float
    u1: np.ndarray
    v1: np.ndarray
    H3: np.ndarray
    J_u2: np.ndarray
    J_v2: np.ndarray
    gamma_g: np.ndarray
    eta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        g = self.grid
        self.u1 = check_complex_field(self.u1, g, "u1")
        self.v1 = check_complex_field(self.v1, g, "v1")
        self.H3 = check_real_field(self.H3, g, "H3")
        self.J_u2 = check_trace(self.J_u2, g, "J_u2")
        self.J_v2 = check_trace(self.J_v2, g, "J_v2")
        self.gamma_g = check_real_field(self.gamma_g, g, "gamma_g")
        self.eta = check_real_field(self.eta, g, "eta")
        self.sigma = check_real_field(self.sigma, g, "sigma")
        if np.any(self.gamma_g * self.sigma <= 0):
            raise ValueError("Γσ must be positive")

    @property
    def q1(self) -> np.ndarray:
        return self.k**2 * (1 + self.eta) + 1j * self.k * self.sigma

    @property
    def q2(self) -> np.ndarray:
        return 4 * self.k**2 * (1 + self.eta) + 2j * self.k * self.sigma


@dataclass
class RowWeights:
    pde: float = 1.0
    data: float | None = None   # None -> 1/h
    neumann: float = 1.0

    def resolve(self, grid: Grid) -> tuple[float, float, float]:
        d = 1.0 / min(grid.hx, grid.hy) if self.data is None else self.data
        return self.pde, d, self.neumann


@dataclass
class GammaSystem:
    """Real least-squares system ``A x ≈ b`` with row blocks labelled."""

    A: sp.csr_matrix
    b: np.ndarray
    blocks: dict          # name -> slice of rows
    n_int: int

    def split(self, x):
        n = self.n_int
        return x[:n], x[n:2 * n], x[2 * n:3 * n], x[3 * n:4 * n], x[4 * n:]


def _cplx_block(M: sp.spmatrix, c) -> sp.csr_matrix:
    """Real 2x2 block form of ``M + diag(c)`` acting on (Re z, Im z)."""
    c = np.asarray(c, dtype=complex)
    R = M + sp.diags(c.real)
    Iq = sp.diags(c.imag)
    return sp.bmat([[R, -Iq], [Iq, R]], format="csr")


def assemble_system(inp: GammaSystemInput, weights: RowWeights | None = None) -> GammaSystem:
    """Real assembly of the PDE, data and Neumann rows in interior unknowns.

    Boundary values of u2, v2 are zero (hard Dirichlet constraint) and are
    eliminated. γ is unknown at interior nodes only; it does not enter any
    boundary row.
    """
    g = inp.grid
    wp, wd, wn = (weights or RowWeights()).resolve(g)
    inn = g.interior_flat
    n = inn.size
    k = inp.k
    L = laplacian_matrix(g)[inn][:, inn]
    D = normal_matrix(g)[:, inn]
    u1 = inp.u1.ravel()[inn]
    v1 = inp.v1.ravel()[inn]
    su = 2 * k**2 * np.conj(u1) * v1           # (Δ+q1)u2 + su γ = 0
    sv = 8 * k**2 * u1**2                      # (Δ+q2)v2 + sv γ = 0
    Z = sp.csr_matrix((n, n))
    Zb = sp.csr_matrix((D.shape[0], n))

    Pu = _cplx_block(L, inp.q1.ravel()[inn])
    Pv = _cplx_block(L, inp.q2.ravel()[inn])
    Gu = sp.vstack([sp.diags(su.real), sp.diags(su.imag)])
    Gv = sp.vstack([sp.diags(sv.real), sp.diags(sv.imag)])
    Z2 = sp.csr_matrix((2 * n, 2 * n))
    pde = sp.bmat([[Pu, Z2, Gu], [Z2, Pv, Gv]])
    # 2 Re(u1* u2) + 2 Re(v1* v2) = H3/(3Γσ)
    data = sp.hstack([sp.diags(2 * u1.real), sp.diags(2 * u1.imag),
                      sp.diags(2 * v1.real), sp.diags(2 * v1.imag), Z])
    neu = sp.bmat([[D, None, None, None, Zb],
                   [None, D, None, None, Zb],
                   [None, None, D, None, Zb],
                   [None, None, None, D, Zb]])
    A = sp.vstack([wp * pde, wd * data, wn * neu]).tocsr()
    rhs_data = (inp.H3 / (3 * inp.gamma_g * inp.sigma)).ravel()[inn]
    b = np.concatenate([np.zeros(4 * n), wd * rhs_data,
                        wn * np.concatenate([inp.J_u2.real, inp.J_u2.imag, inp.J_v2.real, inp.J_v2.imag])])
    nb = D.shape[0]
    blocks = {"pde_u": slice(0, 2 * n), "pde_v": slice(2 * n, 4 * n), "data": slice(4 * n, 5 * n),
              "neumann": slice(5 * n, 5 * n + 4 * nb)}
    return GammaSystem(A, b, blocks, n)


def solve_least_squares(A: sp.spmatrix, b: np.ndarray, refine: int = 3):
    """Column-equilibrated normal equations with iterative refinement.

    The normal matrix is symmetric positive definite, so it is factored with
    a symmetric ordering and no pivoting, which keeps the fill small. A few
    refinement steps on the residual (corrected semi-normal equations)
    recover most of the accuracy lost by squaring the condition number.
    Returns ``(x, r)`` with ``r = b - A x``.
    """
    A = sp.csr_matrix(A)
    cn = np.sqrt(np.asarray(A.multiply(A).sum(axis=0)).ravel())
    if np.any(cn == 0):
        raise SolverError("γ system is rank deficient: empty column")
    As = A @ sp.diags(1.0 / cn)
    N = (As.T @ As).tocsc()
    try:
        lu = spla.splu(N, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SolverError(f"γ system is rank deficient: {exc}") from exc
    y = lu.solve(As.T @ b)
    for _ in range(refine):
        y = y + lu.solve(As.T @ (b - As @ y))
    if not np.all(np.isfinite(y)):
        raise SolverError("γ system is rank deficient (non-finite solution)")
    x = y / cn
    return x, b - A @ x


@dataclass
class GammaResult:
    gamma: np.ndarray
    u2: np.ndarray
    v2: np.ndarray
    residuals: dict
    ellipticity: EllipticityReport

    def residual_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "l2", "linf", "rel_l2"])
        for name, r in self.residuals.items():
            w.writerow([name, repr(r["l2"]), repr(r["linf"]), repr(r["rel_l2"])])
        return buf.getvalue()


def _fill_boundary(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Copy the nearest interior value onto the boundary ring."""
    out = f.copy()
    out[0, :] = out[1, :]
    out[-1, :] = out[-2, :]
    out[:, 0] = out[:, 1]
    out[:, -1] = out[:, -2]
    return out


def assemble_and_solve(inp: GammaSystemInput, weights: RowWeights | None = None,
                       margin_floor: float = 1e-3, residual_tol: float | None = None) -> GammaResult:
    rep = check_ellipticity(inp.u1, inp.v1, floor=margin_floor)
    if not rep.passed:
        raise EllipticityError(f"ellipticity margin {rep.min_margin:.3g} below floor {margin_floor}", rep)
    system = assemble_system(inp, weights)
    x, r = solve_least_squares(system.A, system.b)
    g = inp.grid
    inn = g.interior_flat
    a, bb, c, d, gam = system.split(x)

    def field(vals, dtype=float):
        f = np.zeros(g.size, dtype=dtype)
        f[inn] = vals
        return f.reshape(g.shape)

    u2 = field(a + 1j * bb, complex)
    v2 = field(c + 1j * d, complex)
    gamma = _fill_boundary(field(gam), g)
    res = {}
    for name, sl in system.blocks.items():
        rb = r[sl]
        scale = np.linalg.norm(system.b[sl])
        res[name] = {"l2": float(np.linalg.norm(rb)), "linf": float(np.abs(rb).max(initial=0.0)),
                     "rel_l2": float(np.linalg.norm(rb) / scale) if scale > 0 else float(np.linalg.norm(rb))}
    total = np.linalg.norm(r) / max(np.linalg.norm(system.b), 1e-300)
    res["total"] = {"l2": float(np.linalg.norm(r)), "linf": float(np.abs(r).max(initial=0.0)),
                    "rel_l2": float(total)}
    out = GammaResult(gamma, u2, v2, res, rep)
    if residual_tol is not None and total > residual_tol:
        out.residuals["flag"] = {"l2": float(total), "linf": float(total), "rel_l2": float(total)}
    return out


def gamma_from_u2(u2, u1, v1, q1, k: float, grid: Grid, rel_mask: float = 1e-8):
    """Pointwise elimination γ = -(Δ + q1)u2 / (2k² u1* v1).

    Returns ``(gamma, imag_residue)``: γ is real on interior unmasked nodes
    (NaN elsewhere) and the residue is the largest imaginary part relative
    to max|γ|.
    """
    u1 = np.asarray(u1, dtype=complex)
    v1 = np.asarray(v1, dtype=complex)
    den = 2 * k**2 * np.conj(u1) * v1
    mag = np.abs(den)
    mask = grid.interior_mask & (mag > rel_mask * mag.max(initial=0.0))
    if not mask.any():
        raise ValueError("u1 v1 vanishes on every interior node")
    num = -(laplacian(u2, grid) + np.asarray(q1) * np.asarray(u2))
    gam = np.where(mask, num / np.where(mask, den, 1.0), np.nan)
    re = np.where(mask, gam.real, np.nan)
    scale = max(np.nanmax(np.abs(re)), 1e-300)
    residue = float(np.nanmax(np.abs(gam.imag)) / scale) if np.any(np.abs(re) > 0) else float(np.nanmax(np.abs(gam.imag)))
    return re, residue


class GammaSystemReconstructor(BaseEstimator):
    """Non-iterative γ reconstruction from (H3, J_u2, J_v2).

    Parameters
    ----------
    pde_weight, data_weight, neumann_weight : float
        Soft-row weights; ``data_weight=None`` means 1/h.
    margin_floor : float
        Minimum ellipticity margin accepted.
    residual_tol : float or None
        Relative residual above which the result is flagged.
    """

    def __init__(self, pde_weight=1.0, data_weight=None, neumann_weight=1.0, margin_floor=1e-3,
                 residual_tol=None):
        self.pde_weight = pde_weight
        self.data_weight = data_weight
        self.neumann_weight = neumann_weight
        self.margin_floor = margin_floor
        self.residual_tol = residual_tol

    def fit(self, X: GammaSystemInput, y=None):
        w = RowWeights(self.pde_weight, self.data_weight, self.neumann_weight)
        res = assemble_and_solve(X, w, self.margin_floor, self.residual_tol)
        self.gamma_ = res.gamma
        self.u2_ = res.u2
        self.v2_ = res.v2
        self.residuals_ = res.residuals
        self.ellipticity_ = res.ellipticity
        self.grid_ = X.grid
        self.result_ = res
        return self

    def predict(self, X: GammaSystemInput | None = None) -> np.ndarray:
        """γ for ``X`` (or for the fitted input when ``X`` is None)."""
        if X is None:
            check_is_fitted(self, "gamma_")
            return self.gamma_
        return clone(self).fit(X).gamma_
