"""Task orchestration: build inputs from a config, run one pipeline, write artifacts."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fgrid
from .config import ConfigError, ExperimentConfig, check_admissibility
from .data import add_noise, synthesize
from .direct import DataConditionError, DirectReconstructor, PolarizedPair
from .forward import CoupledOptions, SHGSolution, SolverError, residuals, solve_coupled, solve_one_way
from .gamma_system import GammaSystemInput, GammaSystemReconstructor, gamma_from_u2, rotate_for_ellipticity
from .grid import norm_linf, normal_derivative, rel_l2
from .linearize import EpsFamily, certify_expansion, linearize, solve_first_order
from .optim import EXPERIMENTS, AdjointReconstructor, GradientCheckError, OptData

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CONTRACT = 0, 2, 3, 4


class ContractError(RuntimeError):
    """A certification or acceptance contract of the task was not met."""


def _num(x):
    """JSON-safe float (NaN and inf become strings so the report stays valid JSON)."""
    x = float(x)
    return x if np.isfinite(x) else repr(x)


@dataclass
class RunReport:
    task: str
    status: str = "ok"
    errors: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    failure: dict | None = None
    timings: dict = field(default_factory=dict)

    def payload(self) -> dict:
        """Deterministic part of the report (everything except timings)."""
        return {"task": self.task, "status": self.status, "errors": self.errors,
                "diagnostics": self.diagnostics, "artifacts": dict(sorted(self.artifacts.items())),
                "notes": self.notes, "failure": self.failure}

    def to_json(self) -> str:
        return json.dumps(self.payload(), indent=2, sort_keys=True)


class _Writer:
    """Writes artifacts into ``out`` and records their sha256 digests."""

    def __init__(self, out: Path, report: RunReport):
        self.out = out
        self.report = report
        out.mkdir(parents=True, exist_ok=True)

    def _record(self, path: Path):
        self.report.artifacts[path.relative_to(self.out).as_posix()] = hashlib.sha256(path.read_bytes()).hexdigest()

    def field(self, name, values, grid):
        p = fgrid.write_fgrid(self.out / f"{name}.fgrd", values, grid)
        self._record(p)

    def trace(self, name, values, grid):
        p = fgrid.write_trace(self.out / f"{name}.fgrd", values, grid)
        self._record(p)

    def text(self, name, text):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self._record(p)

    def dataset(self, name, data):
        d = data.save(self.out / name)
        for p in sorted(d.iterdir()):
            self._record(p)


def _error_table(est: dict, truth: dict, grid, mask=None) -> dict:
    out = {}
    for name, f in est.items():
        if name not in truth:
            continue
        m = np.isfinite(f) if mask is None else (mask & np.isfinite(f))
        ref = np.broadcast_to(truth[name], f.shape)
        out[name] = {"rel_l2": _num(rel_l2(f, ref, grid, m)), "linf": _num(norm_linf(f - ref, m))}
    return out


def _truth(media) -> dict:
    return {"gamma_g": media.gamma_g, "eta": media.eta, "sigma": media.sigma, "chi2": media.chi2}


def _coupled_opts(cfg: ExperimentConfig) -> CoupledOptions:
    return CoupledOptions(**cfg.coupled.model_dump())


# ---------------------------------------------------------------------------
# tasks

def _task_forward(cfg, media, ills, w: _Writer, rep: RunReport):
    grid, k = media.grid, cfg.k
    opts = _coupled_opts(cfg)
    trivial = True
    for j, ill in enumerate(ills):
        g, h = ill.traces(grid)
        if cfg.model == "coupled":
            sol = solve_coupled(media, k, g, h, opts)
        elif cfg.model == "one_way":
            sol = solve_one_way(media, k, g)
        else:
            sol = SHGSolution(*solve_first_order(media, k, g, h))
        trivial &= not (np.any(g) or (h is not None and np.any(h)))
        w.field(f"u_{j:03d}", sol.u, grid)
        w.field(f"v_{j:03d}", sol.v, grid)
        d = {"u_linf": _num(np.abs(sol.u).max()), "v_linf": _num(np.abs(sol.v).max()),
             "iterations": int(sol.iterations)}
        if cfg.model == "coupled":
            d["residuals"] = [_num(r) for r in residuals(sol, media, k, g, h)]
            d["contraction_ratio"] = _num(sol.contraction_ratio())
        rep.diagnostics[f"illumination_{j:03d}"] = d
    if trivial:
        rep.notes.append("trivial run: all boundary sources vanish, fields are identically zero")


def _task_synth(cfg, media, ills, w: _Writer, rep: RunReport):
    data = synthesize(media, cfg.k, ills, cfg.model, cfg.noise.level, cfg.noise.seed,
                      cfg.fine_factor, polarized=cfg.model == "linear" and len(ills) > 1,
                      neumann=True, coupled_opts=_coupled_opts(cfg))
    w.dataset("data", data)
    for name, f in _truth(media).items():
        w.field(f"truth_{name}", f, media.grid)
    rep.diagnostics["H_linf"] = [_num(np.abs(H).max()) for H in data.H]
    rep.diagnostics["n_sources"] = data.n_sources


def _task_certify(cfg, media, ills, w: _Writer, rep: RunReport):
    grid = media.grid
    g1, h1 = ills[0].traces(grid)
    g2 = h2 = None
    if len(ills) > 1:
        g2, h2 = ills[1].traces(grid)
    lc = cfg.linearization
    fam = EpsFamily(g1, h1, g2, h2, tuple(lc.eps))
    cr = certify_expansion(media, cfg.k, fam, _coupled_opts(cfg), lc.floor_tol, lc.thresholds)
    w.text("convergence.csv", cr.to_csv())
    w.text("certificate.txt", cr.summary() + "\n")
    rep.diagnostics["slopes"] = {key: _num(v) for key, v in cr.slopes.items()}
    rep.diagnostics["thresholds"] = dict(cr.thresholds)
    rep.diagnostics["flags"] = list(cr.flags)
    if not cr.passed:
        raise ContractError("expansion certificate failed: " + ", ".join(
            f"{key}={v:.3f}" for key, v in cr.slopes.items()))


def _task_direct(cfg, media, ills, w: _Writer, rep: RunReport):
    grid = media.grid
    data = synthesize(media, cfg.k, ills[:2], "linear", cfg.noise.level, cfg.noise.seed,
                      cfg.fine_factor, polarized=True)
    g1 = ills[0].traces(grid)[0]
    est = DirectReconstructor(k=cfg.k, **cfg.direct.model_dump()).fit(PolarizedPair.from_dataset(data, g1))
    for name, f in est.coefficients().items():
        # values in the boundary band are unreliable, so they are stored as NaN
        w.field(f"est_{name}", np.where(est.metric_mask_, f, np.nan), grid)
    w.field("xi", est.xi_, grid)
    rep.errors = _error_table(est.coefficients(), _truth(media), grid, est.metric_mask_)
    rep.diagnostics = {key: (_num(v) if isinstance(v, (float, np.floating)) else
                             bool(v) if isinstance(v, (bool, np.bool_)) else
                             int(v) if isinstance(v, (int, np.integer)) else v)
                       for key, v in est.diagnostics_.items()}


def _task_gamma(cfg, media, ills, w: _Writer, rep: RunReport):
    grid, k = media.grid, cfg.k
    g1, h1 = ills[0].traces(grid)
    if h1 is None:
        h1 = np.zeros(grid.n_boundary, complex)
    u1, v1 = solve_first_order(media, k, g1, h1)
    gc = cfg.gamma
    if gc.margin_target is not None:
        h1, v1, phi, _ = rotate_for_ellipticity(h1, u1, v1, gc.margin_target)
        rep.diagnostics["h1_phase"] = _num(phi)
    b = linearize(media, k, g1, h1)
    H3 = add_noise(b.H3, cfg.noise.level, cfg.noise.seed)
    inp = GammaSystemInput(grid, k, b.u1, b.v1, H3, normal_derivative(b.u2, grid),
                           normal_derivative(b.v2, grid), media.gamma_g, media.eta, media.sigma)
    est = GammaSystemReconstructor(gc.pde_weight, gc.data_weight, gc.neumann_weight,
                                   gc.margin_floor).fit(inp)
    w.field("est_chi2", est.gamma_, grid)
    w.field("est_u2", est.u2_, grid)
    w.text("residuals.csv", est.result_.residual_csv())
    rep.errors = _error_table({"chi2": est.gamma_}, _truth(media), grid)
    cross, resid = gamma_from_u2(est.u2_, b.u1, b.v1, inp.q1, k, grid)
    m = np.isfinite(cross)
    rep.diagnostics["ellipticity_margin"] = _num(est.ellipticity_.min_margin)
    rep.diagnostics["cross_check_rel_l2"] = _num(rel_l2(cross, est.gamma_, grid, m))
    rep.diagnostics["cross_check_imag_residue"] = _num(resid)
    rep.diagnostics["residual_rel_l2"] = {key: _num(v["rel_l2"]) for key, v in est.residuals_.items()}


def _task_opt(cfg, media, ills, w: _Writer, rep: RunReport):
    grid, k = media.grid, cfg.k
    oc = cfg.opt
    spec = EXPERIMENTS[oc.experiment]
    data = synthesize(media, k, ills, "one_way", cfg.noise.level, cfg.noise.seed, cfg.fine_factor)
    truth = _truth(media)
    known = {a: v for a, v in truth.items() if a not in spec["active"]}
    if spec["objective"] == "psi":
        known.pop("gamma_g")
    X = OptData(grid, k, [ill.traces(grid)[0] for ill in ills], data.H, known)
    init = {a: v for a, v in oc.init.items() if a in spec["active"]}
    est = AdjointReconstructor(experiment=oc.experiment, beta=oc.beta, bounds=tuple(cfg.media.bounds),
                               chi2_bounds=(cfg.media.chi2_lower, cfg.media.bounds[1]), init=init,
                               max_iter=oc.max_iter, memory=oc.memory, gtol=oc.gtol, ftol=oc.ftol,
                               guard_tol=oc.guard_tol)
    tr = est.fit(X).trace_
    for name, f in est.estimates_.items():
        w.field(f"est_{name}", f, grid)
    w.text("trace.csv", tr.to_csv())
    rep.errors = _error_table(est.estimates_, truth, grid)
    rep.diagnostics = {"iterations": tr.n_iter, "status": tr.status, "monotone": bool(tr.monotone()),
                       "final_objective": _num(tr.f[-1]), "n_evals": int(est.n_evals_),
                       "guard_errors": [_num(e) for e in tr.guard_errors], "failed": bool(tr.failed)}
    if tr.failed:
        raise SolverError(f"optimizer failed: {tr.status}")


TASK_RUNNERS = {"forward": _task_forward, "synth": _task_synth, "certify_linearization": _task_certify,
                "recon_direct": _task_direct, "recon_gamma": _task_gamma, "recon_opt": _task_opt}


def run(cfg: ExperimentConfig, out) -> tuple[RunReport, int]:
    """Run the configured task, writing artifacts, the manifest and the report into ``out``.

    Returns the report and the process exit code. Failures keep whatever
    artifacts were written before the failing stage.
    """
    out = Path(out)
    rep = RunReport(cfg.task)
    w = _Writer(out, rep)
    (out / "manifest.yaml").write_text(cfg.to_yaml())
    code = EXIT_OK
    stage = "setup"
    t0 = time.perf_counter()
    try:
        media = check_admissibility(cfg)
        ills = [ill.build(cfg.k) for ill in cfg.illuminations]
        rep.timings["setup"] = time.perf_counter() - t0
        stage = cfg.task
        t1 = time.perf_counter()
        TASK_RUNNERS[cfg.task](cfg, media, ills, w, rep)
        rep.timings[cfg.task] = time.perf_counter() - t1
    except ConfigError as exc:
        code = EXIT_CONFIG
        rep.status, rep.failure = "config_error", {"stage": stage, "error": str(exc)}
    except (ContractError, GradientCheckError) as exc:
        code = EXIT_CONTRACT
        rep.status, rep.failure = "contract_failure", {"stage": stage, "error": str(exc)}
    except (SolverError, DataConditionError, np.linalg.LinAlgError) as exc:
        code = EXIT_SOLVER
        rep.status, rep.failure = "solver_failure", {"stage": stage, "error": f"{type(exc).__name__}: {exc}"}
    except ValueError as exc:
        # a violated precondition inside a stage (e.g. data above the small-data cap)
        code = EXIT_CONTRACT
        rep.status, rep.failure = "contract_failure", {"stage": stage, "error": f"{type(exc).__name__}: {exc}"}
    rep.timings["total"] = time.perf_counter() - t0
    (out / "report.json").write_text(rep.to_json() + "\n")
    (out / "timings.json").write_text(json.dumps(rep.timings, indent=2, sort_keys=True) + "\n")
    return rep, code
