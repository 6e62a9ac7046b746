"""Command-line runner: ``shgtat run|validate|export``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, check_admissibility, load_config
from .fgrid import read_fgrid
from .pipeline import EXIT_CONFIG, EXIT_OK, run

SENTINEL_RGB = (255, 0, 255)      # colour for NaN / masked nodes


def export_png(values, path, colormap: str = "viridis", vmin=None, vmax=None) -> Path:
    """Write an 8-bit heatmap of a real field (|f| for complex input) plus a JSON sidecar.

    Row 0 of the image is the top of the domain (largest y). Non-finite nodes
    are painted with ``SENTINEL_RGB``. The sidecar records the colour range
    and the number of masked nodes.
    """
    from matplotlib import colormaps
    from PIL import Image

    f = np.asarray(values)
    if np.iscomplexobj(f):
        f = np.abs(f)
    f = np.asarray(f, dtype=float)
    if f.ndim != 2:
        raise ValueError("export_png expects a 2-D field")
    finite = np.isfinite(f)
    lo, hi = (float(f[finite].min()), float(f[finite].max())) if finite.any() else (0.0, 1.0)
    lo = lo if vmin is None else float(vmin)
    hi = hi if vmax is None else float(vmax)
    span = hi - lo
    t = np.zeros_like(f) if span <= 0 else np.clip((np.where(finite, f, lo) - lo) / span, 0.0, 1.0)
    rgb = (colormaps[colormap](t)[..., :3] * 255).round().astype(np.uint8)
    rgb[~finite] = SENTINEL_RGB
    path = Path(path)
    Image.fromarray(rgb[::-1]).save(path)
    side = {"min": lo, "max": hi, "colormap": colormap, "masked_nodes": int((~finite).sum()),
            "sentinel_rgb": list(SENTINEL_RGB), "shape": list(f.shape)}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def export_fields(target, out=None, colormap: str = "viridis") -> list[Path]:
    """PNG-export one ``.fgrd`` field or every 2-D field in a directory."""
    target = Path(target)
    files = sorted(target.glob("*.fgrd")) if target.is_dir() else [target]
    out = Path(out) if out is not None else (target if target.is_dir() else target.parent)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fp in files:
        values, grid = read_fgrid(fp)
        if grid is None:          # boundary traces are not images
            continue
        written.append(export_png(values, out / (fp.stem + ".png"), colormap))
    return written


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shgtat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the task described by a config")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--out", type=Path, help="output directory (overrides the config)")
    r.add_argument("--seed", type=int, help="noise seed (overrides the config)")
    r.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    r.add_argument("--png", action="store_true", help="also export every field as PNG")

    v = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    v.add_argument("--config", required=True, type=Path)

    e = sub.add_parser("export", help="convert FGRID fields to PNG")
    e.add_argument("path", type=Path, help=".fgrd file or directory")
    e.add_argument("--out", type=Path)
    e.add_argument("--colormap", default="viridis")
    return p


def _load(path, seed=None):
    cfg = load_config(path)
    if seed is not None:
        cfg = cfg.model_copy(update={"noise": cfg.noise.model_copy(update={"seed": seed})})
    check_admissibility(cfg)
    return cfg


def _config_failure(exc: ConfigError) -> int:
    for line in exc.errors:
        print(f"config error: {line}", file=sys.stderr)
    return EXIT_CONFIG


def cmd_validate(args) -> int:
    try:
        cfg = _load(args.config)
    except ConfigError as exc:
        return _config_failure(exc)
    print("ok")
    print(cfg.to_yaml(), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        cfg = _load(args.config, args.seed)
    except ConfigError as exc:
        return _config_failure(exc)
    out = args.out or (Path(cfg.output) if cfg.output else None)
    if out is None:
        return _config_failure(ConfigError(["no output directory: pass --out or set 'output'"]))
    if args.out is not None:
        cfg = cfg.model_copy(update={"output": str(args.out)})
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            rep, code = run(cfg, out)
    else:
        rep, code = run(cfg, out)
    if args.png:
        export_fields(out, out / "png")
    print(f"{rep.task}: {rep.status}")
    for name, e in rep.errors.items():
        print(f"  {name}: rel_l2 {e['rel_l2']}")
    if rep.failure:
        print(f"  failed in {rep.failure['stage']}: {rep.failure['error']}", file=sys.stderr)
    return code


def cmd_export(args) -> int:
    written = export_fields(args.path, args.out, args.colormap)
    for p in written:
        print(p)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    return {"run": cmd_run, "validate": cmd_validate, "export": cmd_export}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
