"""Coefficient phantoms and admissibility checks."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .grid import Grid

KINDS = ("constant", "disk", "square", "gaussian")


class AdmissibilityError(ValueError):
    """A coefficient field leaves its admissible box ``[c1, c2]``."""


@dataclass(frozen=True)
class Inclusion:
    center: tuple[float, float]
    size: float
    amplitude: float


def check_bounds(name: str, f: np.ndarray, lower: float, upper: float) -> None:
    f = np.asarray(f)
    if not np.all(np.isfinite(f)):
        raise AdmissibilityError(f"{name}: non-finite values")
    lo, hi = float(f.min()), float(f.max())
    if lo < lower or hi > upper:
        raise AdmissibilityError(
            f"{name}: values in [{lo:.6g}, {hi:.6g}] violate bounds [{lower:.6g}, {upper:.6g}]")


def _shape(kind: str, X, Y, inc: Inclusion) -> np.ndarray:
    cx, cy = inc.center
    if kind == "disk":
        return ((X - cx) ** 2 + (Y - cy) ** 2 <= inc.size**2).astype(float) if inc.size > 0 else np.zeros_like(X)
    if kind == "square":
        # size is the half side length
        return ((np.abs(X - cx) <= inc.size) & (np.abs(Y - cy) <= inc.size)).astype(float)
    if kind == "gaussian":
        if inc.size <= 0:
            return np.zeros_like(X)
        return np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * inc.size**2))
    raise ValueError(f"unknown phantom kind {kind!r}")


def make_phantom(grid: Grid, kind: str = "constant", background: float = 1.0,
                 inclusions: Sequence[Inclusion | dict] = (), bounds=None,
                 name: str = "phantom") -> np.ndarray:
    """Background value plus additive inclusions of one shape family.

    ``bounds=(c1, c2)`` turns on the admissibility check; a violation raises
    rather than clipping.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {KINDS}")
    f = np.full(grid.shape, float(background))
    if kind != "constant":
        X, Y = grid.mesh
        for inc in inclusions:
            if isinstance(inc, dict):
                inc = Inclusion(tuple(inc["center"]), float(inc["size"]), float(inc["amplitude"]))
            f = f + inc.amplitude * _shape(kind, X, Y, inc)
    if bounds is not None:
        check_bounds(name, f, *bounds)
    return f
