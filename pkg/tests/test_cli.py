import json

import numpy as np
import pytest
import yaml
from PIL import Image

from shgtat.cli import SENTINEL_RGB, export_fields, export_png, main
from shgtat.config import ConfigError, parse_config
from shgtat.fgrid import write_fgrid
from shgtat.grid import Grid
from shgtat.phantoms import Inclusion, make_phantom
from shgtat.pipeline import run

BASE = {
    "task": "forward",
    "grid": {"nx": 17, "ny": 17},
    "k": 2.0,
    "model": "coupled",
    "media": {
        "gamma_g": {"background": 1.0},
        "eta": {"background": 0.2},
        "sigma": {"background": 0.5},
        "chi2": {"kind": "disk", "background": 0.5, "inclusions": [{"center": [0.5, 0.5], "size": 0.2, "amplitude": 1.0}]},
    },
    "illuminations": [{"g": {"pattern": "plane_wave", "amplitude": 0.05}}],
}


def cfg_file(tmp_path, **changes):
    raw = json.loads(json.dumps(BASE))
    for key, val in changes.items():
        raw[key] = val
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(raw))
    return p


def test_validate_minimal_config(tmp_path, capsys):
    assert main(["validate", "--config", str(cfg_file(tmp_path))]) == 0
    out = capsys.readouterr().out
    assert out.startswith("ok")
    assert "stall_window" in out             # defaults are materialized


def test_missing_k_is_a_single_precise_error(tmp_path, capsys):
    raw = dict(BASE)
    raw.pop("k")
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(raw))
    assert main(["validate", "--config", str(p)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err == ["config error: k: Field required"]


def test_all_schema_violations_are_listed():
    raw = dict(BASE, bogus=1, k=-1.0)
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert len(info.value.errors) == 2


def test_out_of_bounds_phantom_names_coefficient(tmp_path, capsys):
    media = dict(BASE["media"], sigma={"background": 7.0})
    assert main(["validate", "--config", str(cfg_file(tmp_path, media=media))]) == 2
    assert "media.sigma" in capsys.readouterr().err


def test_forward_zero_illumination_is_trivial(tmp_path):
    p = cfg_file(tmp_path, illuminations=[{"g": {"pattern": "constant", "amplitude": 0.0}}])
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["notes"] and "trivial" in rep["notes"][0]
    assert rep["diagnostics"]["illumination_000"]["u_linf"] == 0.0


def test_manifest_reruns_identically(tmp_path):
    p = cfg_file(tmp_path)
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "a")]) == 0
    manifest = tmp_path / "a" / "manifest.yaml"
    assert main(["run", "--config", str(manifest), "--out", str(tmp_path / "b"), "--threads", "1"]) == 0
    a = (tmp_path / "a" / "report.json").read_bytes()
    b = (tmp_path / "b" / "report.json").read_bytes()
    assert a == b
    assert (tmp_path / "a" / "u_000.fgrd").read_bytes() == (tmp_path / "b" / "u_000.fgrd").read_bytes()


def test_seed_override_changes_noise(tmp_path):
    p = cfg_file(tmp_path, task="synth", noise={"level": 0.01, "seed": 1})
    main(["run", "--config", str(p), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(p), "--out", str(tmp_path / "b"), "--seed", "2"])
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    assert ra["artifacts"]["data/H_000.fgrd"] != rb["artifacts"]["data/H_000.fgrd"]
    assert "seed: 2" in (tmp_path / "b" / "manifest.yaml").read_text()


def test_solver_failure_exit_code(tmp_path):
    media = dict(BASE["media"], chi2={"background": 5.0})
    p = cfg_file(tmp_path, k=20.0, media=media, coupled={"small_data_cap": 100.0, "max_iter": 20},
                 illuminations=[{"g": {"pattern": "constant", "amplitude": 50.0}}])
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 3
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["status"] == "solver_failure" and rep["failure"]["stage"] == "forward"


def test_certification_failure_exit_code(tmp_path):
    p = cfg_file(tmp_path, task="certify_linearization",
                 illuminations=[{"g": {"pattern": "plane_wave"}}],
                 linearization={"thresholds": {"mu": 99.0}})
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 4
    assert (tmp_path / "o" / "convergence.csv").exists()          # partial artifacts kept


def test_run_needs_output(tmp_path):
    assert main(["run", "--config", str(cfg_file(tmp_path))]) == 2


def test_run_recon_direct_and_png(tmp_path):
    media = {
        "gamma_g": {"kind": "gaussian", "background": 1.0, "inclusions": [{"center": [0.6, 0.4], "size": 0.12, "amplitude": 0.5}]},
        "eta": {"kind": "gaussian", "background": 0.2, "inclusions": [{"center": [0.5, 0.5], "size": 0.15, "amplitude": 0.3}]},
        "sigma": {"kind": "gaussian", "background": 0.5, "inclusions": [{"center": [0.4, 0.6], "size": 0.1, "amplitude": 0.5}]},
        "chi2": {"background": 0.0},
    }
    ills = [{"g": {"pattern": "plane_wave"}},
            {"g": {"pattern": "ramp_plane_wave", "ramp": [1.0, 0.0], "offset": 0.5}}]
    p = cfg_file(tmp_path, task="recon_direct", k=3.0, model="linear", media=media, illuminations=ills,
                 grid={"nx": 61, "ny": 61})
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o"), "--png"]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert set(rep["errors"]) == {"gamma_g", "eta", "sigma"}      # accuracy is covered in test_direct
    assert (tmp_path / "o" / "png" / "est_sigma.png").exists()
    side = json.loads((tmp_path / "o" / "png" / "est_sigma.json").read_text())
    assert side["masked_nodes"] > 0


def test_run_function_reports_config_error(tmp_path):
    raw = dict(BASE, media=dict(BASE["media"], eta={"background": 9.0}))
    cfg = parse_config(raw)
    rep, code = run(cfg, tmp_path / "o")
    assert code == 2 and rep.status == "config_error"


def test_png_constant_field_is_uniform(tmp_path):
    p = export_png(np.full((8, 10), 3.0), tmp_path / "c.png")
    img = np.asarray(Image.open(p))
    assert img.shape == (8, 10, 3)
    assert (img == img[0, 0]).all()
    side = json.loads(p.with_suffix(".json").read_text())
    assert side["min"] == side["max"] == 3.0


def test_png_square_pixel_count(tmp_path):
    g = Grid(51, 51)
    f = make_phantom(g, "square", 1.0, [Inclusion((0.5, 0.5), 0.2, 1.0)])
    img = np.asarray(Image.open(export_png(f, tmp_path / "s.png")))
    hot = np.all(img == img[25, 25], axis=-1)
    assert hot.sum() == int((f > 1).sum())


def test_png_nan_uses_sentinel(tmp_path):
    f = np.ones((5, 5))
    f[2, 3] = np.nan
    img = np.asarray(Image.open(export_png(f, tmp_path / "n.png")))
    assert tuple(img[::-1][2, 3]) == SENTINEL_RGB
    assert json.loads((tmp_path / "n.json").read_text())["masked_nodes"] == 1


def test_export_subcommand(tmp_path, capsys):
    g = Grid(6, 5)
    write_fgrid(tmp_path / "a.fgrd", np.ones(g.shape) + 1j, g)
    assert main(["export", str(tmp_path), "--out", str(tmp_path / "png")]) == 0
    assert (tmp_path / "png" / "a.png").exists()
    assert export_fields(tmp_path / "a.fgrd")[0].name == "a.png"
