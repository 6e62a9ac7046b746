"""Direct reconstruction of (Γ, η, σ) from polarized internal data.

Given E1 = Γσ|u1|² and E2 = Γσ u2 u1*, the quotient E2/E1 = u2/u1 is free of
Γσ, and ξ = u1² satisfies the conservation law ∇·(ξβ) = 0 with
β = ∇(E2/E1). Once ξ is known the potential follows from

    q = -Δ(ξ^½)/ξ^½ = -(2ξΔξ - ∇ξ·∇ξ) / (4ξ²),

which avoids choosing a square-root branch, and Γ = H1 / (σ|ξ|).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from sklearn.base import BaseEstimator

from .grid import Grid, gradient, laplacian, norm_l2
from .validation import check_complex_field, check_is_fitted, check_real_field


class DataConditionError(ValueError):
    """The data violate a positivity or non-degeneracy condition."""


@dataclass
class PolarizedPair:
    """Inputs of the direct pipeline.

    ``E1 = s Γσ|u1|²``, ``E2 = s Γσ u2 u1*`` and ``H1 = s Γσ|u1|²`` for a
    common known positive multiple ``s`` (``scale``).
    """

    grid: Grid
    E1: np.ndarray
    E2: np.ndarray
    H1: np.ndarray
    g1: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.E1 = check_real_field(np.real_if_close(self.E1, tol=1e6), self.grid, "E1")
        self.E2 = check_complex_field(self.E2, self.grid, "E2")
        self.H1 = check_real_field(self.H1, self.grid, "H1")
        self.g1 = np.asarray(self.g1, dtype=complex)
        if self.g1.shape != (self.grid.n_boundary,):
            raise ValueError("g1 must be a boundary trace of the grid")

    @classmethod
    def from_dataset(cls, data, g1, scale: float = 1.0) -> "PolarizedPair":
        if data.E is None or len(data.E) < 2:
            raise ValueError("dataset carries no polarized data E1, E2")
        return cls(data.grid, data.E[0].real, data.E[1], data.H[0], g1, scale)


def build_beta(E1, E2, grid: Grid, alpha0: float | None = None):
    """β = ∇(E2/E1); raises if E1 drops below ``alpha0``."""
    E1 = np.asarray(E1, dtype=float)
    if alpha0 is None:
        alpha0 = 1e-8 * np.abs(E1).max(initial=0.0)
    if not np.all(E1 >= alpha0) or not np.all(E1 > 0):
        raise DataConditionError(f"E1 falls below alpha0 = {alpha0:.3g} (min {E1.min():.3g})")
    return gradient(np.asarray(E2) / E1, grid)


def check_conditions(E1, E2, beta, alpha0_floor: float = 0.0, beta0_floor: float = 0.0,
                     ratio_cap: float = np.inf, mask=None) -> dict:
    """Diagnostics for positivity of E1, non-degeneracy of β and smallness of E2/E1."""
    E1 = np.asarray(E1, dtype=float)
    bmag = np.hypot(np.abs(beta[0]), np.abs(beta[1]))
    ratio = np.abs(np.asarray(E2) / E1)
    sel = (slice(None),) if mask is None else mask
    alpha0 = float(E1[sel].min())
    beta0 = float(bmag[sel].min())
    rep = {
        "alpha0": alpha0,
        "beta0": beta0,
        "beta_sup": float(bmag[sel].max()),
        "e2e1_sup": float(ratio[sel].max()),
    }
    rep["pass_positivity"] = alpha0 > alpha0_floor
    rep["pass_beta"] = beta0 > beta0_floor
    rep["pass_small_ratio"] = rep["e2e1_sup"] <= ratio_cap
    rep["pass"] = rep["pass_positivity"] and rep["pass_beta"]
    return rep


# ---------------------------------------------------------------------------
# transport

def _face_lengths(grid: Grid):
    """Dual-cell face lengths: x-faces span hy (halved on the bottom/top rows)."""
    ly = np.full(grid.ny, grid.hy)
    ly[[0, -1]] *= 0.5
    lx = np.full(grid.nx, grid.hx)
    lx[[0, -1]] *= 0.5
    return lx, ly


def inflow_mask(beta, grid: Grid, tangential_tol: float = 1e-12) -> np.ndarray:
    """Boundary nodes (ring order) with Re(β·ν) < 0; tangential flow counts as outflow."""
    bx, by = grid.trace(beta[0]), grid.trace(beta[1])
    n = grid.boundary_normals
    flux = (bx * n[:, 0] + by * n[:, 1]).real
    mag = np.hypot(np.abs(bx), np.abs(by))
    return flux < -tangential_tol * np.maximum(mag, 1e-300)


def transport_system(beta, grid: Grid, xi_bdry, stabilization: float = 0.0,
                     impose_inflow: bool = True):
    """Conservative first-order upwind discretization of ∇·(ξβ) = 0.

    Returns ``(A, b, inflow)`` where rows at inflow nodes are identity rows
    carrying ``xi_bdry``. Upwinding follows the sign of Re(β·n) on each face;
    boundary faces with inflow take the boundary data as face value.
    ``stabilization`` is the streamline-diffusion coefficient δ (0 disables).
    """
    bx, by = (np.asarray(b, dtype=complex) for b in beta)
    ny, nx = grid.shape
    N = grid.size
    idx = np.arange(N).reshape(grid.shape)
    lx, ly = _face_lengths(grid)
    rows, cols, vals = [], [], []
    rhs = np.zeros(N, dtype=complex)
    xi_full = grid.extend(np.asarray(xi_bdry, dtype=complex))

    # interior x-faces between (j, i) and (j, i+1)
    b = 0.5 * (bx[:, :-1] + bx[:, 1:]) * ly[:, None]
    left, right = idx[:, :-1], idx[:, 1:]
    up = np.where(b.real >= 0, left, right)
    rows += [left.ravel(), right.ravel()]
    cols += [up.ravel(), up.ravel()]
    vals += [b.ravel(), -b.ravel()]
    # interior y-faces between (j, i) and (j+1, i)
    b = 0.5 * (by[:-1, :] + by[1:, :]) * lx[None, :]
    low, high = idx[:-1, :], idx[1:, :]
    up = np.where(b.real >= 0, low, high)
    rows += [low.ravel(), high.ravel()]
    cols += [up.ravel(), up.ravel()]
    vals += [b.ravel(), -b.ravel()]

    # domain boundary faces: outward flux (β·n) ξ_face * length
    for sl, comp, sign, length in (
        ((slice(None), 0), bx, -1.0, ly),
        ((slice(None), -1), bx, 1.0, ly),
        ((0, slice(None)), by, -1.0, lx),
        ((-1, slice(None)), by, 1.0, lx),
    ):
        node = idx[sl]
        f = sign * comp[sl] * length
        out = f.real >= 0
        rows.append(node[out])
        cols.append(node[out])
        vals.append(f[out])
        np.subtract.at(rhs, node[~out], f[~out] * xi_full[sl][~out])

    if stabilization > 0:
        mag = np.hypot(np.abs(bx), np.abs(by))
        safe = np.maximum(mag, 1e-300)
        # x-faces: τ (βx/|β|)² ∂x, y-faces likewise
        for axis, comp, h, L in ((1, bx, grid.hx, ly[:, None]), (0, by, grid.hy, lx[None, :])):
            a = idx[:, :-1] if axis == 1 else idx[:-1, :]
            c = idx[:, 1:] if axis == 1 else idx[1:, :]
            w = (np.abs(comp) / safe) ** 2 * stabilization * h * mag
            w = 0.5 * (w[:, :-1] + w[:, 1:]) if axis == 1 else 0.5 * (w[:-1, :] + w[1:, :])
            d = (w * L / h).ravel()
            a, c = a.ravel(), c.ravel()
            rows += [a, a, c, c]
            cols += [a, c, c, a]
            vals += [d, -d, d, -d]

    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N), dtype=complex)
    inflow = inflow_mask((bx, by), grid)
    if not impose_inflow:
        return A.tocsc(), rhs, inflow
    bnodes = grid.boundary_flat[inflow]
    keep = np.ones(N)
    keep[bnodes] = 0.0
    A = sp.diags(keep) @ A + sp.csr_matrix((np.ones(bnodes.size), (bnodes, bnodes)), shape=(N, N))
    rhs[bnodes] = np.asarray(xi_bdry, dtype=complex)[inflow]
    return A.tocsc(), rhs, inflow


def transport_residual(xi, beta, grid: Grid, xi_bdry) -> np.ndarray:
    """Net outward upwind flux of each dual cell (zero for an exact discrete solution)."""
    A0, b0, _ = transport_system(beta, grid, xi_bdry, impose_inflow=False)
    r = A0 @ np.asarray(xi, dtype=complex).ravel() - b0
    return r.reshape(grid.shape)


def _central_1d(n: int, h: float):
    """Central first difference, 3-point one-sided in the end rows."""
    main = np.zeros(n)
    lo = np.full(n - 1, -0.5 / h)
    hi = np.full(n - 1, 0.5 / h)
    C = sp.diags([lo, main, hi], [-1, 0, 1], format="lil")
    C[0, :3] = np.array([-3.0, 4.0, -1.0]) / (2 * h)
    C[n - 1, n - 3:] = np.array([1.0, -4.0, 3.0]) / (2 * h)
    return C.tocsr()


def least_squares_operator(beta, grid: Grid):
    """Sparse ``K`` with ``K ξ`` = face samples of ∇·(ξβ) = β·∇ξ + (∇·β)ξ.

    Rows are the x-faces then the y-faces of the grid, each scaled by the
    square root of its dual area. The normal derivative across a face is
    compact, the tangential one is the average of nodal central differences.
    """
    from .grid import divergence

    ny, nx = grid.shape
    hx, hy = grid.hx, grid.hy
    bx, by = (np.asarray(b, dtype=complex) for b in beta)
    d = divergence(bx, by, grid).ravel()
    bx, by = bx.ravel(), by.ravel()
    Ix, Iy = sp.identity(nx, format="csr"), sp.identity(ny, format="csr")

    def fwd(n, h):
        return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h

    def avg(n):
        return sp.diags([np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) * 0.5

    Gx, Mx = sp.kron(Iy, fwd(nx, hx)), sp.kron(Iy, avg(nx))
    Gy, My = sp.kron(fwd(ny, hy), Ix), sp.kron(avg(ny), Ix)
    Cx, Cy = sp.kron(Iy, _central_1d(nx, hx)), sp.kron(_central_1d(ny, hy), Ix)
    Kx = sp.diags(Mx @ bx) @ Gx + sp.diags(Mx @ by) @ Mx @ Cy + sp.diags(Mx @ d) @ Mx
    Ky = sp.diags(My @ bx) @ My @ Cx + sp.diags(My @ by) @ Gy + sp.diags(My @ d) @ My
    w = np.sqrt(grid.cell_area)
    return (sp.vstack([Kx, Ky]) * w).tocsc()


@dataclass
class TransportResult:
    xi: np.ndarray
    inflow: np.ndarray
    residual: float
    inflow_error: float
    method: str = "upwind"


TRANSPORT_METHODS = ("least_squares", "upwind")


def solve_transport(beta, g1, grid: Grid, stabilization: float = 0.0,
                    method: str = "least_squares") -> TransportResult:
    """Solve ∇·(ξβ) = 0 for ξ = u1².

    ``method="upwind"`` marches from the inflow set {Re(β·ν) < 0} with the
    conservative upwind scheme; it is stable when β is a real multiple of a
    real field. For genuinely complex β (Re β and Im β not parallel) the
    equation is elliptic rather than hyperbolic and marching amplifies
    errors, so ``method="least_squares"`` minimizes the face residual of
    ∇·(ξβ) with ξ = g1² on the whole boundary instead.
    """
    g1 = np.asarray(g1, dtype=complex)
    if method not in TRANSPORT_METHODS:
        raise ValueError(f"unknown transport method {method!r}")
    inflow = inflow_mask(beta, grid)
    if not inflow.any():
        raise DataConditionError("β has no inflow boundary; transport problem is degenerate")
    xb = g1**2
    if method == "upwind":
        A, b, inflow = transport_system(beta, grid, xb, stabilization)
        with np.errstate(all="ignore"):
            try:
                lu = spla.splu(A)
            except RuntimeError as exc:  # exactly singular factor
                raise DataConditionError(f"transport solve failed: {exc}") from exc
            xi = lu.solve(b)
        if not np.all(np.isfinite(xi)):
            raise DataConditionError("transport solve produced non-finite values")
        res = A @ xi - b
        rows = np.ones(grid.size, dtype=bool)
        rows[grid.boundary_flat[inflow]] = False
        resid = float(np.abs(res[rows]).max(initial=0.0))
    else:
        K = least_squares_operator(beta, grid)
        inn, bf = grid.interior_flat, grid.boundary_flat
        KI, KB = K[:, inn], K[:, bf]
        normal = (KI.conj().T @ KI).tocsc()
        rhs = -(KI.conj().T @ (KB @ xb))
        try:
            # Hermitian positive definite: a symmetric ordering halves the fill
            lu = spla.splu(normal, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise DataConditionError(f"transport normal equations are singular: {exc}") from exc
        xi = np.empty(grid.size, dtype=complex)
        xi[bf] = xb
        xi[inn] = lu.solve(rhs)
        r = K @ xi
        resid = float(np.linalg.norm(r) / max(np.linalg.norm(K[:, bf] @ xb), 1e-300))
    xi = xi.reshape(grid.shape)
    return TransportResult(xi, inflow, resid,
                           float(np.abs(grid.trace(xi)[inflow] - xb[inflow]).max(initial=0.0)), method)


# ---------------------------------------------------------------------------
# potential and Grüneisen coefficient

def reassemble_potential(eta, sigma, k: float) -> np.ndarray:
    return k**2 * (1 + np.asarray(eta)) + 1j * k * np.asarray(sigma)


@dataclass
class PotentialResult:
    q: np.ndarray
    eta: np.ndarray
    sigma: np.ndarray
    mask: np.ndarray
    negative_sigma: np.ndarray


def recover_potential(xi, grid: Grid, k: float, mask_rel: float = 1e-6) -> PotentialResult:
    """q = -(2ξΔξ - ∇ξ·∇ξ)/(4ξ²), then η = Re q/k² - 1 and σ = Im q/k.

    Nodes with ``|ξ| < mask_rel * max|ξ|`` are masked (set to NaN). The
    returned ``q`` is reassembled from (η, σ) so the two agree exactly.
    """
    xi = np.asarray(xi, dtype=complex)
    mag = np.abs(xi)
    mask = mag >= mask_rel * mag.max(initial=0.0)
    safe = np.where(mask, xi, 1.0)
    lap = laplacian(xi, grid)
    gx, gy = gradient(xi, grid)
    q_raw = -(2 * safe * lap - (gx * gx + gy * gy)) / (4 * safe**2)
    eta = np.where(mask, q_raw.real / k**2 - 1, np.nan)
    sigma = np.where(mask, q_raw.imag / k, np.nan)
    q = reassemble_potential(eta, sigma, k)
    return PotentialResult(q, eta, sigma, mask, mask & (sigma < 0))


def recover_grueneisen(H1, sigma, xi, mask=None, scale: float = 1.0) -> np.ndarray:
    """Γ = H1 / (s σ |ξ|) on unmasked nodes (|u1|² = |ξ|)."""
    H1 = np.asarray(H1, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    den = scale * sigma * np.abs(xi)
    ok = np.isfinite(den) & (den > 0)
    if mask is not None:
        ok &= mask
    return np.where(ok, H1 / np.where(ok, den, 1.0), np.nan)


def h2_norm(f, grid: Grid, mask=None) -> float:
    """Discrete H² norm (values, first and second derivatives)."""
    f = np.asarray(f)
    fx, fy = gradient(f, grid)
    fxx, fxy = gradient(fx, grid)
    _, fyy = gradient(fy, grid)
    parts = [f, fx, fy, fxx, fxy, fyy]
    return float(np.sqrt(sum(norm_l2(p, grid, mask) ** 2 for p in parts)))


def stability_ratio(result_a, result_b, pair_a: PolarizedPair, pair_b: PolarizedPair, mask=None) -> dict:
    """Measured ratio ‖Γσ - Γ̃σ̃‖ / (‖H1 - H̃1‖ + ‖E - Ẽ‖_{H²})."""
    grid = pair_a.grid
    m = np.isfinite(result_a.gamma_g_ * result_a.sigma_) & np.isfinite(result_b.gamma_g_ * result_b.sigma_)
    if mask is not None:
        m &= mask
    num = norm_l2(np.nan_to_num(result_a.gamma_g_ * result_a.sigma_ - result_b.gamma_g_ * result_b.sigma_),
                  grid, m)
    den = (norm_l2(pair_a.H1 - pair_b.H1, grid, m)
           + np.hypot(h2_norm(pair_a.E1 - pair_b.E1, grid, m), h2_norm(pair_a.E2 - pair_b.E2, grid, m)))
    return {"coefficient_diff": num, "data_diff": den, "ratio": num / den if den > 0 else (0.0 if num == 0 else np.inf)}


class DirectReconstructor(BaseEstimator):
    """Non-iterative reconstruction of (Γ, η, σ) from a polarized data pair.

    Parameters
    ----------
    k : float
        Wavenumber of the incident field.
    alpha0_rel : float
        Positivity floor for E1 relative to its maximum.
    xi_mask_rel : float
        Nodes with |ξ| below this fraction of max|ξ| are masked.
    method : {"least_squares", "upwind"}
        Transport discretization, see :func:`solve_transport`.
    stabilization : float
        Streamline-diffusion coefficient of the upwind scheme (0 = off).
    band : float
        Width of the boundary band excluded from error metrics, as a
        fraction of the shorter domain side. Second derivatives of ξ are
        one-sided there and much less accurate.
    beta0_floor : float
        Minimum admissible |β| on the metric region.
    """

    def __init__(self, k=1.0, alpha0_rel=1e-8, xi_mask_rel=1e-6, method="least_squares",
                 stabilization=0.5, band=0.05, beta0_floor=0.0):
        self.k = k
        self.alpha0_rel = alpha0_rel
        self.xi_mask_rel = xi_mask_rel
        self.method = method
        self.stabilization = stabilization
        self.band = band
        self.beta0_floor = beta0_floor

    def _band(self, grid: Grid) -> np.ndarray:
        nodes = int(round(self.band * (min(grid.nx, grid.ny) - 1)))
        return grid.interior_band(max(nodes, 1))

    def fit(self, X: PolarizedPair, y=None):
        grid = X.grid
        alpha0 = self.alpha0_rel * X.E1.max()
        beta = build_beta(X.E1, X.E2, grid, alpha0)
        if self.k <= 0:
            raise ValueError("k must be positive")
        band = self._band(grid)
        self.conditions_ = check_conditions(X.E1, X.E2, beta, alpha0, self.beta0_floor, mask=band)
        if not self.conditions_["pass_beta"]:
            raise DataConditionError(f"|β| is degenerate (min {self.conditions_['beta0']:.3g})")
        tr = solve_transport(beta, X.g1, grid, self.stabilization, self.method)
        pot = recover_potential(tr.xi, grid, self.k, self.xi_mask_rel)
        self.beta_ = beta
        self.xi_ = tr.xi
        self.q_ = pot.q
        self.eta_ = pot.eta
        self.sigma_ = pot.sigma
        self.mask_ = pot.mask & ~pot.negative_sigma
        self.gamma_g_ = recover_grueneisen(X.H1, pot.sigma, tr.xi, self.mask_, X.scale)
        self.metric_mask_ = self.mask_ & band
        self.diagnostics_ = dict(self.conditions_, transport_residual=tr.residual,
                                 transport_method=tr.method,
                                 inflow_error=tr.inflow_error, inflow_nodes=int(tr.inflow.sum()),
                                 masked_nodes=int((~self.mask_).sum()),
                                 negative_sigma_nodes=int(pot.negative_sigma.sum()))
        self.grid_ = grid
        return self

    def coefficients(self) -> dict:
        check_is_fitted(self, "eta_")
        return {"gamma_g": self.gamma_g_, "eta": self.eta_, "sigma": self.sigma_}

    def errors(self, truth: dict) -> dict:
        """Relative l2 errors on the metric mask against known coefficients."""
        from .grid import rel_l2

        check_is_fitted(self, "eta_")
        out = {}
        for name, est in self.coefficients().items():
            if name in truth:
                m = self.metric_mask_ & np.isfinite(est)
                out[name] = rel_l2(est, np.broadcast_to(truth[name], est.shape), self.grid_, m)
        return out
