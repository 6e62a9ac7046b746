"""Synthetic internal data, polarization and noisy measurement sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import fgrid
from .forward import (CoupledOptions, HelmholtzOperator, MediumSet, SHGSolution, one_way_operators,
                      potentials, solve_coupled, solve_one_way)
from .grid import Grid, normal_derivative

MODELS = ("coupled", "one_way", "linear")


# ---------------------------------------------------------------------------
# illuminations

@dataclass
class Illumination:
    """Boundary sources for one experiment.

    ``g`` and ``h`` are either callables ``f(x, y) -> complex`` (evaluated on
    whatever grid is in use) or fixed boundary traces.
    """

    g: Callable | np.ndarray
    h: Callable | np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def traces(self, grid: Grid) -> tuple[np.ndarray, np.ndarray | None]:
        return _trace(self.g, grid), (None if self.h is None else _trace(self.h, grid))

    def scaled(self, c) -> "Illumination":
        return Illumination(_scale(self.g, c), None if self.h is None else _scale(self.h, c),
                            dict(self.meta, scale=repr(c)))


def _trace(src, grid: Grid) -> np.ndarray:
    if callable(src):
        return grid.evaluate_trace(src).astype(complex)
    src = np.asarray(src, dtype=complex)
    if src.shape != (grid.n_boundary,):
        raise ValueError("fixed boundary trace does not match the grid")
    return src


def _scale(src, c):
    if callable(src):
        return lambda X, Y: c * src(X, Y)
    return c * np.asarray(src)


def _combine(a, b, c):
    """Trace source for ``a + c*b``."""
    if callable(a) and callable(b):
        return lambda X, Y: a(X, Y) + c * b(X, Y)
    if callable(a) or callable(b):
        raise ValueError("cannot combine a callable source with a fixed trace")
    return np.asarray(a) + c * np.asarray(b)


def plane_wave(k: float, angle: float = 0.0, amplitude: complex = 1.0) -> Callable:
    d = np.array([np.cos(angle), np.sin(angle)])
    return lambda X, Y: amplitude * np.exp(1j * k * (d[0] * X + d[1] * Y))


def boundary_bump(center, width: float, amplitude: complex = 1.0) -> Callable:
    cx, cy = center
    return lambda X, Y: amplitude * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * width**2)) + 0j


def constant(value: complex = 1.0) -> Callable:
    return lambda X, Y: value + 0j * X


def ramp_plane_wave(k: float, angle: float = 0.0, ramp=(1.0, 0.0), offset: float = 0.0,
                    amplitude: complex = 1.0) -> Callable:
    """``amplitude * (offset + ramp . x) * exp(ik d . x)``."""
    pw = plane_wave(k, angle, amplitude)
    return lambda X, Y: (offset + ramp[0] * X + ramp[1] * Y) * pw(X, Y)


# ---------------------------------------------------------------------------
# data operators

def internal_data(u, v, gamma_g, sigma) -> np.ndarray:
    """H = Γσ(|u|² + |v|²)."""
    u = np.asarray(u)
    v = np.zeros_like(u) if v is None else np.asarray(v)
    if u.shape != v.shape or np.shape(gamma_g) not in ((), u.shape) or np.shape(sigma) not in ((), u.shape):
        raise ValueError("internal_data needs fields on one grid")
    return np.asarray(gamma_g) * np.asarray(sigma) * (np.abs(u) ** 2 + np.abs(v) ** 2)


def neumann_data(u, v, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    return normal_derivative(u, grid), normal_derivative(v, grid)


def polarize(H1, H2, H_sum, H_isum) -> np.ndarray:
    """Cross term from four intensities via the polarization identity.

    With ``H1 ~ |u1|²``, ``H2 ~ |u2|²``, ``H_sum ~ |u1+u2|²`` and
    ``H_isum ~ |u1+i u2|²`` (all sharing one positive weight Γσ) this
    returns ``Γσ u1 u2*``.
    """
    arrs = [np.asarray(a) for a in (H1, H2, H_sum, H_isum)]
    if len({a.shape for a in arrs}) != 1:
        raise ValueError("polarize needs four fields on one grid")
    H1, H2, H_sum, H_isum = arrs
    return 0.5 * (H_sum + 1j * H_isum - (1 + 1j) * H1 - (1 + 1j) * H2)


def polarized_data(H1, Hj, H_sum, H_isum) -> np.ndarray:
    """E_j = Γσ u_j u1*, the conjugate of :func:`polarize`."""
    return np.conj(polarize(H1, Hj, H_sum, H_isum))


def add_noise(H, level: float, seed: int | None = None, stream: int = 0) -> np.ndarray:
    """Multiplicative Gaussian noise ``H (1 + level * z)``.

    The generator is keyed by ``(seed, stream)`` so the output for one
    illumination does not depend on the order in which others are drawn.
    """
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    H = np.asarray(H, dtype=float)
    if level == 0:
        return H.copy()
    key = [0 if seed is None else int(seed), int(stream)]
    z = np.random.default_rng(key).standard_normal(H.shape)
    return H * (1 + level * z)


# ---------------------------------------------------------------------------
# datasets

@dataclass
class DataSet:
    grid: Grid
    H: list
    E: list | None = None
    J_u: list | None = None
    J_v: list | None = None
    noise_level: float = 0.0
    seed: int = 0
    model: str = "one_way"
    fine_factor: int = 1
    k: float | None = None
    solutions: list | None = field(default=None, repr=False)

    @property
    def n_sources(self) -> int:
        return len(self.H)

    def manifest(self) -> dict:
        return {"format": "shgtat-dataset", "version": 1, "N_s": self.n_sources,
                "model": self.model, "noise_level": self.noise_level, "seed": self.seed,
                "fine_factor": self.fine_factor, "k": self.k,
                "grid": {"nx": self.grid.nx, "ny": self.grid.ny, "x0": self.grid.x0,
                         "y0": self.grid.y0, "lx": self.grid.lx, "ly": self.grid.ly},
                "has_E": self.E is not None, "has_J": self.J_u is not None,
                "boundary_order": "counter-clockwise from (x0, y0): bottom, right, top, left"}

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for j, H in enumerate(self.H):
            fgrid.write_fgrid(d / f"H_{j:03d}.fgrd", H, self.grid)
        for j, E in enumerate(self.E or []):
            fgrid.write_fgrid(d / f"E_{j:03d}.fgrd", E, self.grid)
        for j, (Ju, Jv) in enumerate(zip(self.J_u or [], self.J_v or [])):
            fgrid.write_trace(d / f"J_u_{j:03d}.fgrd", Ju, self.grid)
            fgrid.write_trace(d / f"J_v_{j:03d}.fgrd", Jv, self.grid)
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "DataSet":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        grid = Grid(**man["grid"])
        n = man["N_s"]
        H = [fgrid.read_fgrid(d / f"H_{j:03d}.fgrd")[0] for j in range(n)]
        E = [fgrid.read_fgrid(d / f"E_{j:03d}.fgrd")[0] for j in range(n)] if man["has_E"] else None
        J_u = J_v = None
        if man["has_J"]:
            J_u = [fgrid.read_trace(d / f"J_u_{j:03d}.fgrd") for j in range(n)]
            J_v = [fgrid.read_trace(d / f"J_v_{j:03d}.fgrd") for j in range(n)]
        return cls(grid, H, E, J_u, J_v, man["noise_level"], man["seed"], man["model"],
                   man["fine_factor"], man.get("k"))


def _solve(media: MediumSet, k: float, g, h, model: str, ops, coupled_opts) -> SHGSolution:
    if model == "coupled":
        return solve_coupled(media, k, g, h, coupled_opts, operators=ops)
    if model == "one_way":
        return solve_one_way(media, k, g, operators=ops)
    u = ops[0].solve(None, g)
    return SHGSolution(u, np.zeros_like(u))


def _operators(media: MediumSet, k: float, model: str):
    if model == "one_way":
        return one_way_operators(media, k)
    q1, q2 = potentials(media, k)
    return (HelmholtzOperator(q1, media.grid, allow_nonabsorbing=media.override),
            HelmholtzOperator(q2, media.grid, allow_nonabsorbing=media.override))


def synthesize(media: MediumSet, k: float, illuminations, model: str = "one_way",
               noise_level: float = 0.0, seed: int = 0, fine_factor: int = 1,
               polarized: bool = False, neumann: bool = False,
               coupled_opts: CoupledOptions | None = None, keep_solutions: bool = False) -> DataSet:
    """Solve every illumination and assemble internal (and optional derived) data.

    ``polarized=True`` also measures the combinations ``g1 + gj`` and
    ``g1 + i gj`` and returns ``E_j = Γσ u_j u1*``; it requires a linear
    model for the u-field (``model="linear"``). ``fine_factor > 1`` solves
    on a refined grid and injects the results back onto ``media.grid``.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    if polarized and model != "linear":
        raise ValueError("polarized data need the linear u-model")
    illuminations = list(illuminations)
    if not illuminations:
        raise ValueError("need at least one illumination")
    coarse = media.grid
    if fine_factor > 1:
        work = coarse.refine(fine_factor)
        wmedia = media.resample(work)
    else:
        work, wmedia = coarse, media
    ops = _operators(wmedia, k, model)

    def measure(g, h, stream):
        sol = _solve(wmedia, k, g, h, model, ops, coupled_opts)
        H = internal_data(sol.u, sol.v, wmedia.gamma_g, wmedia.sigma)
        H = add_noise(H, noise_level, seed, stream)
        return sol, H

    Hs, sols = [], []
    for j, ill in enumerate(illuminations):
        g, h = ill.traces(work)
        sol, H = measure(g, h, j)
        sols.append(sol)
        Hs.append(H)

    Es = None
    if polarized:
        Es = [Hs[0].astype(complex)]
        g1 = illuminations[0].g
        n = len(illuminations)
        for j in range(1, n):
            gj = illuminations[j].g
            _, Hsum = measure(_trace(_combine(g1, gj, 1.0), work), None, n + 2 * (j - 1))
            _, Hisum = measure(_trace(_combine(g1, gj, 1j), work), None, n + 2 * (j - 1) + 1)
            Es.append(polarized_data(Hs[0], Hs[j], Hsum, Hisum))

    J_u = J_v = None
    if neumann:
        J_u, J_v = [], []
        for sol in sols:
            ju, jv = neumann_data(sol.u, sol.v, work)
            J_u.append(ju[::fine_factor])
            J_v.append(jv[::fine_factor])

    if fine_factor > 1:
        Hs = [coarse.restrict(H, fine_factor) for H in Hs]
        if Es is not None:
            Es = [coarse.restrict(E, fine_factor) for E in Es]
        sols = [SHGSolution(coarse.restrict(s.u, fine_factor), coarse.restrict(s.v, fine_factor),
                            s.iterations, s.final_update_norm, s.history) for s in sols]

    return DataSet(coarse, Hs, Es, J_u, J_v, noise_level, seed, model, fine_factor, k,
                   sols if keep_solutions else None)
