import numpy as np
import pytest

from shgtat.fgrid import read_fgrid, read_trace, write_csv, write_fgrid, write_trace
from shgtat.grid import Grid
from shgtat.phantoms import AdmissibilityError, Inclusion, check_bounds, make_phantom


def test_fgrid_roundtrip_real_and_complex(tmp_path, rng):
    g = Grid(7, 5, x0=-1.0, y0=0.5, lx=2.0, ly=0.25)
    for f in (rng.standard_normal(g.shape), rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)):
        p = write_fgrid(tmp_path / "f.fgrd", f, g)
        back, g2 = read_fgrid(p)
        np.testing.assert_array_equal(back, f)
        assert g2 == g
        assert back.dtype == f.dtype


def test_fgrid_layout_is_little_endian_header(tmp_path):
    g = Grid(3, 3)
    raw = write_fgrid(tmp_path / "a.fgrd", np.arange(9.0).reshape(3, 3), g).read_bytes()
    assert raw[:4] == b"FGRD"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert np.frombuffer(raw[-72:], "<f8")[1] == 1.0       # x fastest


def test_fgrid_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.fgrd"
    p.write_bytes(b"NOPE" + bytes(60))
    with pytest.raises(ValueError):
        read_fgrid(p)
    with pytest.raises(ValueError):
        write_fgrid(tmp_path / "x.fgrd", np.zeros((2, 2)), Grid(3, 3))


def test_trace_roundtrip(tmp_path, rng):
    g = Grid(6, 4)
    t = rng.standard_normal(g.n_boundary) + 1j
    np.testing.assert_array_equal(read_trace(write_trace(tmp_path / "t.fgrd", t, g)), t)


def test_csv_export(tmp_path):
    g = Grid(3, 3)
    p = write_csv(tmp_path / "f.csv", np.ones(g.shape), g)
    assert len(p.read_text().strip().splitlines()) >= 9


def test_constant_phantom():
    g = Grid(11, 11)
    np.testing.assert_array_equal(make_phantom(g, "constant", 1.0), 1.0)


def test_zero_radius_disk_is_background():
    g = Grid(11, 11)
    np.testing.assert_array_equal(make_phantom(g, "disk", 2.0, [Inclusion((0.5, 0.5), 0.0, 1.0)]), 2.0)


def test_square_phantom_area_fraction():
    g = Grid(101, 101)
    f = make_phantom(g, "square", 1.0, [Inclusion((0.5, 0.5), 0.2, 0.5)])
    assert f.min() == 1.0 and f.max() == 1.5
    frac = np.mean(f > 1.0)
    band = 4 * 0.4 * g.hx + 4 * g.hx**2            # one cell around the perimeter
    assert abs(frac - 0.16) <= band


def test_bounds_violation_names_coefficient():
    g = Grid(5, 5)
    with pytest.raises(AdmissibilityError, match="sigma"):
        make_phantom(g, "constant", 9.0, bounds=(0.05, 5.0), name="sigma")
    with pytest.raises(AdmissibilityError):
        check_bounds("eta", np.array([np.nan]), 0, 1)


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_phantom(Grid(5, 5), "star", 1.0)
