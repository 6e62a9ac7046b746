"""Experiment configuration schema (YAML on disk, validated with pydantic)."""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .data import Illumination, boundary_bump, constant, plane_wave, ramp_plane_wave
from .forward import MediumSet
from .grid import Grid
from .phantoms import AdmissibilityError, Inclusion, check_bounds, make_phantom

TASKS = ("forward", "synth", "certify_linearization", "recon_direct", "recon_gamma", "recon_opt")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Strict):
    nx: int = Field(ge=4)
    ny: int = Field(ge=4)
    x0: float = 0.0
    y0: float = 0.0
    lx: float = Field(1.0, gt=0)
    ly: float = Field(1.0, gt=0)

    def build(self) -> Grid:
        return Grid(self.nx, self.ny, self.x0, self.y0, self.lx, self.ly)


class InclusionConfig(_Strict):
    center: tuple[float, float]
    size: float = Field(gt=0)
    amplitude: float


class PhantomConfig(_Strict):
    kind: Literal["constant", "disk", "square", "gaussian"] = "constant"
    background: float
    inclusions: list[InclusionConfig] = []

    def build(self, grid: Grid) -> np.ndarray:
        incs = [Inclusion(tuple(i.center), i.size, i.amplitude) for i in self.inclusions]
        return make_phantom(grid, self.kind, self.background, incs)


class MediaConfig(_Strict):
    bounds: tuple[float, float] = (0.05, 5.0)
    chi2_lower: float = 0.0
    gamma_g: PhantomConfig
    eta: PhantomConfig
    sigma: PhantomConfig
    chi2: PhantomConfig

    @model_validator(mode="after")
    def _bounds_ok(self):
        lo, hi = self.bounds
        if not 0 < lo <= hi:
            raise ValueError("bounds must satisfy 0 < lower <= upper")
        if not 0 <= self.chi2_lower <= hi:
            raise ValueError("chi2_lower must lie in [0, upper bound]")
        return self

    def build(self, grid: Grid) -> MediumSet:
        fields = {}
        for name in ("gamma_g", "eta", "sigma", "chi2"):
            f = getattr(self, name).build(grid)
            lo = self.chi2_lower if name == "chi2" else self.bounds[0]
            check_bounds(name, f, lo, self.bounds[1])
            fields[name] = f
        return MediumSet(grid, bounds=tuple(self.bounds), chi2_lower=self.chi2_lower, **fields)


class PlaneWave(_Strict):
    pattern: Literal["plane_wave"]
    angle: float = 0.0
    amplitude: float = 1.0
    phase: float = 0.0
    k_factor: float = 1.0           # wavenumber multiple of k (2 for a second-harmonic trace)


class RampPlaneWave(_Strict):
    pattern: Literal["ramp_plane_wave"]
    angle: float = 0.0
    ramp: tuple[float, float] = (1.0, 0.0)
    offset: float = 0.0
    amplitude: float = 1.0
    phase: float = 0.0
    k_factor: float = 1.0


class BoundaryBump(_Strict):
    pattern: Literal["boundary_bump"]
    center: tuple[float, float]
    width: float = Field(gt=0)
    amplitude: float = 1.0
    phase: float = 0.0


class Constant(_Strict):
    pattern: Literal["constant"]
    amplitude: float = 1.0
    phase: float = 0.0


Pattern = Annotated[Union[PlaneWave, RampPlaneWave, BoundaryBump, Constant], Field(discriminator="pattern")]


def build_pattern(p, k: float):
    amp = p.amplitude * np.exp(1j * p.phase)
    if p.pattern == "plane_wave":
        return plane_wave(p.k_factor * k, p.angle, amp)
    if p.pattern == "ramp_plane_wave":
        return ramp_plane_wave(p.k_factor * k, p.angle, tuple(p.ramp), p.offset, amp)
    if p.pattern == "boundary_bump":
        return boundary_bump(tuple(p.center), p.width, amp)
    return constant(amp)


class IlluminationConfig(_Strict):
    g: Pattern
    h: Optional[Pattern] = None

    def build(self, k: float) -> Illumination:
        return Illumination(build_pattern(self.g, k), None if self.h is None else build_pattern(self.h, k),
                            {"g": self.g.model_dump(), "h": None if self.h is None else self.h.model_dump()})


class NoiseConfig(_Strict):
    level: float = Field(0.0, ge=0)
    seed: int = 0


class CoupledConfig(_Strict):
    fp_tol: float = Field(1e-12, gt=0)
    max_iter: int = Field(200, ge=1)
    res_tol: float = Field(1e-10, gt=0)
    small_data_cap: float = Field(0.1, gt=0)
    stall_window: int = Field(10, ge=2)


class LinearizationConfig(_Strict):
    eps: list[float] = [0.08, 0.04, 0.02, 0.01]
    floor_tol: float = Field(1e-10, gt=0)
    thresholds: dict[str, float] = {"mu": 2.7, "nu": 2.7, "rho": 3.7, "H": 1.9}

    @field_validator("eps")
    @classmethod
    def _decreasing(cls, v):
        if len(v) < 2 or any(e <= 0 for e in v) or any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("eps must be at least two strictly decreasing positive values")
        return v


class DirectConfig(_Strict):
    alpha0_rel: float = Field(1e-8, gt=0)
    xi_mask_rel: float = Field(1e-6, gt=0)
    method: Literal["least_squares", "upwind"] = "least_squares"
    stabilization: float = Field(0.5, ge=0)
    band: float = Field(0.05, ge=0, lt=0.5)
    beta0_floor: float = Field(0.0, ge=0)


class GammaConfig(_Strict):
    pde_weight: float = Field(1.0, gt=0)
    data_weight: Optional[float] = None
    neumann_weight: float = Field(1.0, gt=0)
    margin_floor: float = Field(1e-3, ge=0)
    margin_target: Optional[float] = 0.5     # None disables the phase rotation of h1


class OptConfig(_Strict):
    experiment: Literal["I", "II", "III", "IV"] = "I"
    beta: float = Field(1e-7, ge=0)
    max_iter: int = Field(500, ge=1)
    memory: int = Field(10, ge=1)
    gtol: float = Field(1e-8, ge=0)
    ftol: float = Field(1e-12, ge=0)
    guard_tol: float = Field(1e-3, gt=0)
    init: dict[Literal["eta", "sigma", "chi2"], float] = {}


class ExperimentConfig(_Strict):
    task: Literal[TASKS]
    output: Optional[str] = None
    grid: GridConfig
    k: float = Field(gt=0)
    media: MediaConfig
    illuminations: list[IlluminationConfig] = Field(min_length=1)
    model: Literal["coupled", "one_way", "linear"] = "one_way"
    noise: NoiseConfig = NoiseConfig()
    fine_factor: int = Field(1, ge=1)
    coupled: CoupledConfig = CoupledConfig()
    linearization: LinearizationConfig = LinearizationConfig()
    direct: DirectConfig = DirectConfig()
    gamma: GammaConfig = GammaConfig()
    opt: OptConfig = OptConfig()

    @model_validator(mode="after")
    def _task_needs(self):
        n = len(self.illuminations)
        if self.task == "recon_direct" and n < 2:
            raise ValueError("recon_direct needs two illuminations (g1 and g2)")
        if self.task == "recon_opt" and self.opt.experiment in ("III", "IV") and n < 2:
            raise ValueError("experiments III and IV need at least two illuminations")
        return self

    # -- helpers ------------------------------------------------------------
    def manifest(self) -> dict:
        """Every field with defaults filled in, as plain YAML-able data."""
        return self.model_dump(mode="json")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.manifest(), sort_keys=True)


class ConfigError(ValueError):
    """The configuration file is unreadable or violates the schema."""

    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


def load_config(path) -> ExperimentConfig:
    """Parse and validate a YAML config; every violation is collected."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"invalid YAML: {exc}"]) from exc
    return parse_config(raw)


def parse_config(raw) -> ExperimentConfig:
    from pydantic import ValidationError

    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping at the top level"])
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError([f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}"
                           for e in exc.errors()]) from exc
    return cfg


def check_admissibility(cfg: ExperimentConfig) -> MediumSet:
    """Build the media on the configured grid; raises naming the coefficient."""
    grid = cfg.grid.build()
    try:
        return cfg.media.build(grid)
    except AdmissibilityError as exc:
        raise ConfigError([f"media.{exc}"]) from exc
