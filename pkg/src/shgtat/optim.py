"""Adjoint-state least-squares reconstruction on the one-way Robin model.

The forward model is

    A1(η, σ) u_j = [g_j on ∂Ω],
    A2(η, σ) v_j = -4k²γ u_j²  (interior),  v_j + 2ik ∂νv_j = 0 (boundary),

and the unknowns are nodal values of a subset of (η, σ, γ). Gradients are
exact gradients of the discrete objective (discretize-then-optimize): the
adjoint solves reuse the forward factorizations in transposed mode.
"""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import line_search
from scipy.optimize._linesearch import LineSearchWarning
from sklearn.base import BaseEstimator

from .forward import BCSpec, HelmholtzOperator, MediumSet, SolverError
from .grid import Grid, rel_l2

FIELDS = ("eta", "sigma", "chi2")
EXPERIMENTS = {
    "I": {"active": ("chi2",), "objective": "phi"},
    "II": {"active": ("eta", "sigma", "chi2"), "objective": "phi"},
    "III": {"active": ("eta", "chi2"), "objective": "psi"},
    "IV": {"active": ("eta", "sigma", "chi2"), "objective": "psi"},
}


class GradientCheckError(RuntimeError):
    """The adjoint gradient disagrees with finite differences."""


# ---------------------------------------------------------------------------
# regularization

def _edge_difference(grid: Grid):
    """Forward differences on x-edges and y-edges, stacked."""
    ny, nx = grid.shape
    dx = sp.diags([-np.ones(nx - 1), np.ones(nx - 1)], [0, 1], shape=(nx - 1, nx)) / grid.hx
    dy = sp.diags([-np.ones(ny - 1), np.ones(ny - 1)], [0, 1], shape=(ny - 1, ny)) / grid.hy
    return sp.vstack([sp.kron(sp.identity(ny), dx), sp.kron(dy, sp.identity(nx))]).tocsr()


def gradient_penalty(f, grid: Grid) -> tuple[float, np.ndarray]:
    """``½‖∇f‖²`` with forward differences, and its nodal gradient.

    The gradient is the Neumann graph Laplacian ``hx hy GᵀG f``; at interior
    nodes it equals ``-Δ_h f`` times the cell area.
    """
    G = _edge_difference(grid)
    d = G @ np.asarray(f, dtype=float).ravel()
    w = grid.cell_area
    return 0.5 * w * float(d @ d), (w * (G.T @ d)).reshape(grid.shape)


# ---------------------------------------------------------------------------
# problem definition

@dataclass
class OptData:
    """Measurements and known coefficients for one reconstruction."""

    grid: Grid
    k: float
    g: list                   # boundary traces, one per illumination
    H: list                   # internal data, one per illumination
    known: dict               # values for every non-active coefficient (incl. gamma_g)

    def __post_init__(self):
        if len(self.g) != len(self.H) or not self.H:
            raise ValueError("need one boundary trace per data field")
        self.g = [np.asarray(t, dtype=complex) for t in self.g]
        self.H = [np.asarray(h, dtype=float) for h in self.H]
        for h in self.H:
            if h.shape != self.grid.shape:
                raise ValueError("data field does not match the grid")
        self.known = {key: np.broadcast_to(np.asarray(v, dtype=float), self.grid.shape).copy()
                      for key, v in self.known.items()}

    @property
    def n_sources(self) -> int:
        return len(self.H)


class OneWayProblem:
    """Discrete objective and adjoint gradient for one experiment.

    Parameters
    ----------
    data : OptData
    active : tuple of field names among ("eta", "sigma", "chi2")
    objective : "phi" (data misfit with known Γ) or "psi" (ratio misfit, Γ-free)
    reg : dict field -> β (gradient penalty weight)
    """

    def __init__(self, data: OptData, active, objective: str = "phi", reg=None):
        if objective not in ("phi", "psi"):
            raise ValueError(f"unknown objective {objective!r}")
        bad = [a for a in active if a not in FIELDS]
        if bad or not active:
            raise ValueError(f"active fields must be a non-empty subset of {FIELDS}, got {active}")
        self.data = data
        self.active = tuple(active)
        self.objective = objective
        self.reg = {a: float((reg or {}).get(a, 0.0)) for a in self.active}
        if any(b < 0 for b in self.reg.values()):
            raise ValueError("regularization weights must be nonnegative")
        need = [f for f in FIELDS if f not in self.active]
        if objective == "phi":
            need.append("gamma_g")
        missing = [f for f in need if f not in data.known]
        if missing:
            raise ValueError(f"known values missing for {missing}")
        if objective == "psi":
            if data.n_sources < 2:
                raise ValueError("the ratio objective needs at least two illuminations")
            if np.any(data.H[0] <= 0):
                raise ValueError("the reference datum H_1 must be positive")
        self._ops_key = None
        self._ops = None
        self.n_evals = 0

    # -- parameter vector ---------------------------------------------------
    @property
    def size(self) -> int:
        return len(self.active) * self.data.grid.size

    def pack(self, fields: dict) -> np.ndarray:
        return np.concatenate([np.asarray(fields[a], dtype=float).ravel() for a in self.active])

    def unpack(self, x) -> dict:
        x = np.asarray(x, dtype=float)
        if x.size != self.size:
            raise ValueError(f"parameter vector has size {x.size}, expected {self.size}")
        shape = self.data.grid.shape
        n = self.data.grid.size
        out = {f: self.data.known[f] for f in FIELDS if f not in self.active}
        for i, a in enumerate(self.active):
            out[a] = x[i * n:(i + 1) * n].reshape(shape)
        return out

    # -- forward ------------------------------------------------------------
    def operators(self, eta, sigma):
        key = (eta.tobytes(), sigma.tobytes())
        if key != self._ops_key:
            k, grid = self.data.k, self.data.grid
            q1 = k**2 * (1 + eta) + 1j * k * sigma
            q2 = 4 * k**2 * (1 + eta) + 2j * k * sigma
            self._ops = (HelmholtzOperator(q1, grid, allow_nonabsorbing=True),
                         HelmholtzOperator(q2, grid, BCSpec.robin_zero(2.0), k, allow_nonabsorbing=True))
            self._ops_key = key
        return self._ops

    def forward(self, fields: dict):
        op1, op2 = self.operators(fields["eta"], fields["sigma"])
        k = self.data.k
        out = []
        for g in self.data.g:
            u = op1.solve(None, g, r_tol=None)
            v = op2.solve(-4 * k**2 * fields["chi2"] * u**2, None, r_tol=None)
            out.append((u, v))
        return out

    # -- objective ----------------------------------------------------------
    def _misfit(self, fields, sols):
        """Data term and the adjoint sources ∂J/∂u, ∂J/∂v (dJ = Re Σ a·du)."""
        w = self.data.grid.cell_area
        H = self.data.H
        au, av = [], []
        if self.objective == "phi":
            gs = self.data.known["gamma_g"] * fields["sigma"]
            J = 0.0
            explicit_sigma = np.zeros(self.data.grid.shape)
            for (u, v), Hj in zip(sols, H):
                S = np.abs(u) ** 2 + np.abs(v) ** 2
                r = gs * S - Hj
                J += 0.5 * w * float(np.sum(r * r))
                au.append(2 * w * r * gs * np.conj(u))
                av.append(2 * w * r * gs * np.conj(v))
                explicit_sigma += w * r * self.data.known["gamma_g"] * S
            return J, au, av, explicit_sigma
        S = [np.abs(u) ** 2 + np.abs(v) ** 2 for u, v in sols]
        S1 = S[0]
        J = 0.0
        au = [np.zeros(S1.shape, dtype=complex) for _ in sols]
        av = [np.zeros(S1.shape, dtype=complex) for _ in sols]
        u1, v1 = sols[0]
        for j in range(1, len(sols)):
            u, v = sols[j]
            R = S[j] / S1 - H[j] / H[0]
            J += 0.5 * w * float(np.sum(R * R))
            au[j] += 2 * w * R * np.conj(u) / S1
            av[j] += 2 * w * R * np.conj(v) / S1
            c = 2 * w * R * S[j] / S1**2
            au[0] -= c * np.conj(u1)
            av[0] -= c * np.conj(v1)
        return J, au, av, None

    def value(self, x) -> float:
        fields = self.unpack(x)
        sols = self.forward(fields)
        J = self._misfit(fields, sols)[0]
        self.n_evals += 1
        return J + self._reg_value(fields)

    def _reg_value(self, fields) -> float:
        return sum(b * gradient_penalty(fields[a], self.data.grid)[0]
                   for a, b in self.reg.items() if b > 0)

    def value_and_grad(self, x):
        fields = self.unpack(x)
        sols = self.forward(fields)
        J, au, av, explicit_sigma = self._misfit(fields, sols)
        op1, op2 = self.operators(fields["eta"], fields["sigma"])
        k = self.data.k
        grid = self.data.grid
        interior = grid.interior_mask
        shape = grid.shape
        grads = {a: np.zeros(shape) for a in self.active}
        need_u = "eta" in self.active or "sigma" in self.active
        for (u, v), a_u, a_v in zip(sols, au, av):
            lam_v = op2.solve_transpose(a_v.ravel()).reshape(shape)
            if "chi2" in self.active:
                grads["chi2"] += np.where(interior, (lam_v * (-4 * k**2 * u**2)).real, 0.0)
            if need_u:
                a_tot = a_u + np.where(interior, -8 * k**2 * fields["chi2"] * u * lam_v, 0.0)
                lam_u = op1.solve_transpose(a_tot.ravel()).reshape(shape)
                if "eta" in self.active:
                    g = -k**2 * lam_u * u - 4 * k**2 * lam_v * v
                    grads["eta"] += np.where(interior, g.real, 0.0)
                if "sigma" in self.active:
                    g = -1j * k * lam_u * u - 2j * k * lam_v * v
                    grads["sigma"] += np.where(interior, g.real, 0.0)
        if explicit_sigma is not None and "sigma" in self.active:
            grads["sigma"] += explicit_sigma
        total = J
        for a, b in self.reg.items():
            if b > 0:
                val, gr = gradient_penalty(fields[a], grid)
                total += b * val
                grads[a] += b * gr
        self.n_evals += 1
        return total, np.concatenate([grads[a].ravel() for a in self.active])


# ---------------------------------------------------------------------------
# finite-difference oracle

def check_gradient(fun_and_grad, x, n_probes: int = 5, t: float = 1e-5, seed: int = 0,
                   tol: float | None = None, directions=None) -> list:
    """Compare directional derivatives with central differences.

    Returns a list of relative errors; raises :class:`GradientCheckError`
    when ``tol`` is given and any probe exceeds it. Directions are random
    unit vectors (scaled to the magnitude of ``x``) unless supplied.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    _, g = fun_and_grad(x)
    errs = []
    scale = max(np.abs(x).max(initial=0.0), 1.0)
    for i in range(n_probes):
        if directions is not None:
            d = np.asarray(directions[i], dtype=float)
        else:
            d = rng.standard_normal(x.shape)
            d *= scale / np.abs(d).max()
        an = float(g @ d)
        fp = fun_and_grad(x + t * d)[0]
        fm = fun_and_grad(x - t * d)[0]
        fd = (fp - fm) / (2 * t)
        errs.append(abs(an - fd) / max(abs(an), abs(fd), 1e-300))
    if tol is not None and max(errs) > tol:
        raise GradientCheckError(f"gradient check failed: max relative error {max(errs):.3e} > {tol}")
    return errs


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptOptions:
    memory: int = 10
    max_iter: int = 500
    gtol: float = 1e-8        # relative to the initial projected gradient norm
    ftol: float = 1e-12       # relative objective decrease
    c1: float = 1e-4
    c2: float = 0.9
    ls_maxiter: int = 40
    guard_tol: float = 1e-3
    guard_probes: int = 2
    guard_seed: int = 0


@dataclass
class OptTrace:
    f: list = field(default_factory=list)
    gnorm: list = field(default_factory=list)
    step: list = field(default_factory=list)
    ls_evals: list = field(default_factory=list)
    projected: list = field(default_factory=list)
    status: str = ""
    failed: bool = False
    guard_errors: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def n_iter(self) -> int:
        return max(len(self.f) - 1, 0)

    def monotone(self) -> bool:
        f = np.asarray(self.f)
        return bool(np.all(np.diff(f) <= 1e-14 * np.maximum(np.abs(f[:-1]), 1e-300)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "f", "gnorm", "step", "ls_evals", "projected"])
        for i, row in enumerate(zip(self.f, self.gnorm, self.step, self.ls_evals, self.projected)):
            w.writerow([i, repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), int(row[3]),
                        int(row[4])])
        return buf.getvalue()


class _Memo:
    """Caches (f, g) per point so the line search and the outer loop share evaluations."""

    def __init__(self, fg):
        self.fg = fg
        self.key = None
        self.val = None
        self.count = 0

    def __call__(self, x):
        key = np.asarray(x, dtype=float).tobytes()
        if key != self.key:
            self.val = self.fg(np.asarray(x, dtype=float))
            self.key = key
            self.count += 1
        return self.val

    def f(self, x):
        return self(x)[0]

    def g(self, x):
        return self(x)[1]


def _projected_gradient(x, g, lo, hi):
    pg = g.copy()
    pg[(x <= lo) & (g > 0)] = 0.0
    pg[(x >= hi) & (g < 0)] = 0.0
    return pg


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y), a in zip(zip(S, Y), reversed(alphas)):
        rho = 1.0 / (y @ s)
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(fun_and_grad, x0, bounds=None, opts: OptOptions | None = None,
                   guard: bool = True) -> tuple[np.ndarray, OptTrace]:
    """Limited-memory BFGS with a strong-Wolfe line search and box projection.

    ``bounds`` is ``(lo, hi)`` (scalars or arrays) or None. Variables held at
    a bound with the gradient pointing outward are frozen for the step.
    Before iterating, the gradient is checked against central differences
    (``opts.guard_tol``) unless ``guard=False``.
    """
    opts = opts or OptOptions()
    x = np.asarray(x0, dtype=float).copy()
    lo = np.full(x.shape, -np.inf) if bounds is None else np.broadcast_to(bounds[0], x.shape).astype(float)
    hi = np.full(x.shape, np.inf) if bounds is None else np.broadcast_to(bounds[1], x.shape).astype(float)
    x = np.clip(x, lo, hi)
    memo = _Memo(fun_and_grad)
    trace = OptTrace()
    if guard:
        trace.guard_errors = check_gradient(memo, x, opts.guard_probes, seed=opts.guard_seed,
                                            tol=opts.guard_tol)
    f, g = memo(x)
    pg = _projected_gradient(x, g, lo, hi)
    g0 = np.linalg.norm(pg)
    trace.f.append(f)
    trace.gnorm.append(g0)
    trace.step.append(0.0)
    trace.ls_evals.append(0)
    trace.projected.append(False)
    S, Y = [], []
    if g0 == 0:
        trace.status = "zero gradient at start"
        return x, trace
    f_old_old = None
    for it in range(opts.max_iter):
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        gf = np.where(free, g, 0.0)
        p = np.where(free, _two_loop(gf, S, Y), 0.0)
        if p @ gf >= 0:            # not a descent direction: restart
            S, Y = [], []
            p = -gf
        # largest step keeping the point inside the box
        with np.errstate(divide="ignore", invalid="ignore"):
            amax_hi = np.where(p > 0, (hi - x) / p, np.inf)
            amax_lo = np.where(p < 0, (lo - x) / p, np.inf)
        amax = float(min(np.min(amax_hi), np.min(amax_lo), 1e10))
        n0 = memo.count
        alpha = None
        if amax > 0:
            # a failed Wolfe search is handled by the fallback below
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LineSearchWarning)
                res = line_search(memo.f, memo.g, x, p, gfk=g, old_fval=f, old_old_fval=f_old_old,
                                  c1=opts.c1, c2=opts.c2, amax=amax, maxiter=opts.ls_maxiter)
            alpha = res[0]
        if alpha is None:
            # fall back to projected backtracking (Armijo along the projection arc)
            alpha = 1.0
            for _ in range(opts.ls_maxiter):
                xt = np.clip(x + alpha * p, lo, hi)
                if memo.f(xt) <= f + opts.c1 * (g @ (xt - x)):
                    break
                alpha *= 0.5
            else:
                trace.status = "line search failed"
                trace.failed = True
                break
        x_new = np.clip(x + alpha * p, lo, hi)
        projected = bool(np.any(x_new != x + alpha * p))
        f_new, g_new = memo(x_new)
        if f_new > f:
            trace.status = "line search failed"
            trace.failed = True
            break
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > opts.memory:
                S.pop(0)
                Y.pop(0)
        f_old_old, f_prev = f, f
        x, f, g = x_new, f_new, g_new
        pg = _projected_gradient(x, g, lo, hi)
        trace.f.append(f)
        trace.gnorm.append(float(np.linalg.norm(pg)))
        trace.step.append(float(alpha))
        trace.ls_evals.append(memo.count - n0)
        trace.projected.append(projected)
        if trace.gnorm[-1] <= opts.gtol * g0:
            trace.status = "gradient tolerance"
            break
        if f_prev - f <= opts.ftol * max(abs(f_prev), np.finfo(float).tiny):
            trace.status = "objective tolerance"
            break
    else:
        trace.status = "max_iter"
    return x, trace


# ---------------------------------------------------------------------------
# Γ averaging

def recover_gamma_g_avg(H, sigma, solutions, rel_mask: float = 1e-12):
    """Γ = (1/N_s) Σ_j H_j / (σ(|u_j|² + |v_j|²)).

    Returns ``(gamma_g, mask)``; nodes where any denominator falls below
    ``rel_mask`` times its maximum are NaN.
    """
    H = [np.asarray(h, dtype=float) for h in H]
    if not H or len(H) != len(solutions):
        raise ValueError("need one solution per data field")
    sigma = np.asarray(sigma, dtype=float)
    total = np.zeros(H[0].shape)
    mask = np.ones(H[0].shape, dtype=bool)
    for h, (u, v) in zip(H, solutions):
        den = sigma * (np.abs(u) ** 2 + np.abs(v) ** 2)
        ok = den > rel_mask * np.abs(den).max(initial=0.0)
        mask &= ok
        total += np.where(ok, h / np.where(ok, den, 1.0), 0.0)
    if not mask.any():
        raise ValueError("every node is masked in the Γ average")
    return np.where(mask, total / len(H), np.nan), mask


# ---------------------------------------------------------------------------
# estimator

class AdjointReconstructor(BaseEstimator):
    """Least-squares reconstruction for Experiments I-IV.

    Parameters
    ----------
    experiment : {"I", "II", "III", "IV"}
    beta : float
        Gradient-penalty weight applied to every active field.
    bounds : (float, float)
        Box for η and σ.
    chi2_bounds : (float, float)
        Box for γ.
    init : dict or None
        Warm start per active field (scalar or array); missing fields start
        at the midpoint of their box.
    max_iter, memory, gtol, ftol : optimizer settings
    guard_tol : float
        Tolerance of the automatic finite-difference check before iterating.
    """

    def __init__(self, experiment="I", beta=1e-7, bounds=(0.05, 5.0), chi2_bounds=(0.0, 5.0),
                 init=None, max_iter=500, memory=10, gtol=1e-8, ftol=1e-12, guard_tol=1e-3,
                 guard_seed=0):
        self.experiment = experiment
        self.beta = beta
        self.bounds = bounds
        self.chi2_bounds = chi2_bounds
        self.init = init
        self.max_iter = max_iter
        self.memory = memory
        self.gtol = gtol
        self.ftol = ftol
        self.guard_tol = guard_tol
        self.guard_seed = guard_seed

    def _problem(self, X: OptData) -> OneWayProblem:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        spec = EXPERIMENTS[self.experiment]
        reg = {a: self.beta for a in spec["active"]}
        return OneWayProblem(X, spec["active"], spec["objective"], reg)

    def _box(self, name):
        return self.chi2_bounds if name == "chi2" else self.bounds

    def fit(self, X: OptData, y=None):
        t0 = time.perf_counter()
        prob = self._problem(X)
        grid = X.grid
        init = dict(self.init or {})
        start, lo, hi, notes = {}, [], [], {}
        for a in prob.active:
            b = self._box(a)
            if a in init:
                start[a] = np.broadcast_to(np.asarray(init[a], dtype=float), grid.shape)
                notes[f"init_{a}"] = "warm start"
            else:
                start[a] = np.full(grid.shape, 0.5 * (b[0] + b[1]))
                notes[f"init_{a}"] = "box midpoint"
            lo.append(np.full(grid.size, b[0]))
            hi.append(np.full(grid.size, b[1]))
        opts = OptOptions(memory=self.memory, max_iter=self.max_iter, gtol=self.gtol, ftol=self.ftol,
                          guard_tol=self.guard_tol, guard_seed=self.guard_seed)
        x, trace = lbfgs_minimize(prob.value_and_grad, prob.pack(start),
                                  (np.concatenate(lo), np.concatenate(hi)), opts)
        trace.notes.update(notes)
        fields = prob.unpack(x)
        self.estimates_ = {a: fields[a].copy() for a in prob.active}
        sols = prob.forward(fields)
        self.solutions_ = sols
        if EXPERIMENTS[self.experiment]["objective"] == "psi":
            gam, mask = recover_gamma_g_avg(X.H, fields["sigma"], sols)
            self.estimates_["gamma_g"] = gam
            self.gamma_mask_ = mask
        self.trace_ = trace
        self.n_evals_ = prob.n_evals
        self.elapsed_ = time.perf_counter() - t0
        self.grid_ = grid
        return self

    def errors(self, truth: dict, mask=None) -> dict:
        out = {}
        for name, est in self.estimates_.items():
            if name in truth:
                m = np.isfinite(est) if mask is None else (mask & np.isfinite(est))
                out[name] = rel_l2(est, np.broadcast_to(truth[name], est.shape), self.grid_, m)
        return out


def media_from_fields(grid: Grid, fields: dict, bounds=(0.05, 5.0)) -> MediumSet:
    return MediumSet(grid, fields["gamma_g"], fields["eta"], fields["sigma"], fields["chi2"],
                     bounds=bounds, chi2_lower=0.0)


__all__ = ["AdjointReconstructor", "OneWayProblem", "OptData", "OptOptions", "OptTrace",
           "GradientCheckError", "check_gradient", "lbfgs_minimize", "recover_gamma_g_avg",
           "gradient_penalty", "EXPERIMENTS", "SolverError"]
