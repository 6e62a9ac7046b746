import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shgtat import Grid, MediumSet
from shgtat.data import (DataSet, Illumination, add_noise, internal_data, neumann_data, plane_wave, polarize,
                         polarized_data, ramp_plane_wave, synthesize)
from shgtat.grid import rel_l2

finite = st.floats(-1e3, 1e3, allow_nan=False)
cplx = st.builds(complex, finite, finite)


def intensities(u1, u2, w):
    return (w * abs(u1) ** 2, w * abs(u2) ** 2, w * abs(u1 + u2) ** 2, w * abs(u1 + 1j * u2) ** 2)


def test_internal_data_examples(rng):
    assert internal_data(1.0, 2j, 1.0, 1.0) == pytest.approx(5.0)
    assert np.all(internal_data(np.zeros(4), np.zeros(4), 1.0, 1.0) == 0)
    u = rng.standard_normal(50) + 1j * rng.standard_normal(50)
    v = rng.standard_normal(50) + 1j * rng.standard_normal(50)
    gam, sig = 1 + rng.random(50), 1 + rng.random(50)
    np.testing.assert_allclose(internal_data(u, v, gam, sig) / (gam * sig) - abs(u) ** 2 - abs(v) ** 2, 0,
                               atol=1e-12)


def test_polarize_hand_examples():
    assert polarize(1.0, 1.0, 4.0, 2.0) == pytest.approx(1.0)
    # u1 = 1, u2 = i: the identity returns u1 u2* = -i, and the data convention is its conjugate
    assert polarize(1.0, 1.0, 2.0, 0.0) == pytest.approx(-1j)
    assert polarized_data(1.0, 1.0, 2.0, 0.0) == pytest.approx(1j)


@settings(max_examples=200, deadline=None)
@given(cplx, cplx, st.floats(1e-3, 10.0))
def test_polarize_recovers_cross_term(u1, u2, w):
    E = polarize(*intensities(u1, u2, w))
    ref = w * u1 * np.conj(u2)
    scale = w * (abs(u1) ** 2 + abs(u2) ** 2) + 1e-300
    assert abs(E - ref) <= 1e-12 * scale


def test_polarize_vectorized(rng):
    u1 = rng.standard_normal(1000) + 1j * rng.standard_normal(1000)
    u2 = rng.standard_normal(1000) + 1j * rng.standard_normal(1000)
    w = 0.5 + rng.random(1000)
    E = polarized_data(*intensities(u1, u2, w))
    ref = w * u2 * np.conj(u1)
    assert np.max(np.abs(E - ref) / np.abs(ref)) <= 1e-12


def test_polarize_shape_mismatch():
    with pytest.raises(ValueError):
        polarize(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(4))


def test_noise_examples():
    H = np.ones((100, 100))
    np.testing.assert_array_equal(add_noise(H, 0.0, 3), H)
    np.testing.assert_array_equal(add_noise(H, 0.01, 3), add_noise(H, 0.01, 3))
    assert not np.array_equal(add_noise(H, 0.01, 3, stream=0), add_noise(H, 0.01, 3, stream=1))
    g = Grid(100, 100)
    assert rel_l2(add_noise(H, 0.01, 3), H, g) == pytest.approx(0.01, abs=0.003)
    with pytest.raises(ValueError):
        add_noise(H, -1.0)


def test_neumann_data_examples():
    g = Grid(11, 11)
    X, _ = g.mesh
    ju, jv = neumann_data(np.full(g.shape, 2.0), X + 0j, g)
    np.testing.assert_allclose(ju, 0, atol=1e-12)
    right = (g.boundary_index[1] == g.nx - 1) & (g.boundary_index[0] > 0) & (g.boundary_index[0] < g.ny - 1)
    np.testing.assert_allclose(jv[right], 1.0)


@pytest.fixture
def media():
    g = Grid(21, 21)
    return MediumSet(g, 1.0, 0.2, 0.5, 1.0)


def test_zero_illumination_dataset(media):
    d = synthesize(media, 3.0, [Illumination(lambda X, Y: 0 * X)])
    assert d.n_sources == 1 and np.all(d.H[0] == 0)


def test_fine_factor_changes_data_by_discretization_error():
    g = Grid(41, 41)
    m = MediumSet(g, 1.0, 0.2, 0.5, 1.0)
    ills = [Illumination(plane_wave(3.0))]
    d1 = synthesize(m, 3.0, ills, fine_factor=1)
    d2 = synthesize(m, 3.0, ills, fine_factor=2)
    assert 0 < rel_l2(d1.H[0], d2.H[0], g) < 10 * g.hx**2 * 9


def test_polarized_with_equal_sources_is_real(media):
    ill = Illumination(plane_wave(3.0))
    d = synthesize(media, 3.0, [ill, ill], model="linear", polarized=True)
    np.testing.assert_allclose(d.E[1].imag, 0, atol=1e-12)
    np.testing.assert_allclose(d.E[1].real, d.H[0], rtol=1e-12)
    np.testing.assert_allclose(d.E[0], d.H[0])


def test_polarized_matches_cross_term(media):
    ills = [Illumination(plane_wave(3.0)), Illumination(ramp_plane_wave(3.0, ramp=(1, 0), offset=0.5))]
    d = synthesize(media, 3.0, ills, model="linear", polarized=True, keep_solutions=True)
    u1, u2 = d.solutions[0].u, d.solutions[1].u
    ref = media.gamma_g * media.sigma * u2 * np.conj(u1)
    np.testing.assert_allclose(d.E[1], ref, atol=1e-12 * np.abs(ref).max())


def test_polarized_requires_linear_model(media):
    with pytest.raises(ValueError):
        synthesize(media, 3.0, [Illumination(plane_wave(3.0))] * 2, model="one_way", polarized=True)


def test_linear_model_scales_quadratically(media):
    ill = Illumination(plane_wave(3.0))
    d1 = synthesize(media, 3.0, [ill], model="linear")
    d2 = synthesize(media, 3.0, [ill.scaled(3.0)], model="linear")
    np.testing.assert_allclose(d2.H[0], 9 * d1.H[0], rtol=0, atol=1e-12 * d2.H[0].max())


def test_dataset_roundtrip(tmp_path, media):
    d = synthesize(media, 3.0, [Illumination(plane_wave(3.0)), Illumination(plane_wave(3.0, 1.0))],
                   model="linear", polarized=True, neumann=True, noise_level=0.01, seed=5)
    back = DataSet.load(d.save(tmp_path / "ds"))
    assert back.n_sources == 2 and back.seed == 5 and back.k == 3.0
    for a, b in zip(d.H + d.E + d.J_u, back.H + back.E + back.J_u):
        np.testing.assert_array_equal(a, b)


def test_synthesize_validation(media):
    with pytest.raises(ValueError):
        synthesize(media, 3.0, [])
    with pytest.raises(ValueError):
        synthesize(media, 3.0, [Illumination(plane_wave(3.0))], model="nonlinear")
