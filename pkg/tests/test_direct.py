import numpy as np
import pytest

from shgtat import Grid, MediumSet
from shgtat.data import Illumination, plane_wave, ramp_plane_wave, synthesize
from shgtat.direct import (DataConditionError, DirectReconstructor, PolarizedPair, build_beta, check_conditions,
                           inflow_mask, reassemble_potential, recover_grueneisen, recover_potential,
                           solve_transport, stability_ratio, transport_residual)
from shgtat.grid import rel_l2
from shgtat.phantoms import Inclusion, make_phantom
from shgtat.validation import NotFittedError


def test_beta_examples():
    g = Grid(11, 11)
    X, _ = g.mesh
    E1 = 1.0 + X
    bx, by = build_beta(E1, 3.0 * E1, g)
    np.testing.assert_allclose(bx, 0, atol=1e-12)
    np.testing.assert_allclose(by, 0, atol=1e-12)
    bx, by = build_beta(E1, X * E1, g)
    np.testing.assert_allclose(bx, 1.0, atol=1e-12)
    np.testing.assert_allclose(by, 0.0, atol=1e-12)


def test_beta_rejects_vanishing_e1():
    g = Grid(5, 5)
    with pytest.raises(DataConditionError):
        build_beta(np.zeros(g.shape), np.ones(g.shape), g)


def test_condition_examples():
    g = Grid(11, 11)
    X, _ = g.mesh
    E1 = np.ones(g.shape)
    rep = check_conditions(E1, 2 * E1, build_beta(E1, 2 * E1, g))
    assert rep["beta0"] == pytest.approx(0, abs=1e-12) and not rep["pass_beta"]
    rep = check_conditions(E1, X, build_beta(E1, X, g))
    assert rep["beta0"] == pytest.approx(1.0) and rep["pass"]


def _const_beta(g, bx=1.0, by=0.0):
    return np.full(g.shape, bx, complex), np.full(g.shape, by, complex)


def test_inflow_of_axis_flow_is_left_edge():
    g = Grid(9, 7)
    inflow = inflow_mask(_const_beta(g), g)
    r, c = g.boundary_index
    np.testing.assert_array_equal(inflow, c == 0)


@pytest.mark.parametrize("method", ["upwind", "least_squares"])
def test_constant_is_transported(method):
    g = Grid(15, 11)
    tr = solve_transport(_const_beta(g), np.ones(g.n_boundary), g, method=method)
    np.testing.assert_allclose(tr.xi, 1.0, atol=1e-12)


@pytest.mark.parametrize("method", ["upwind", "least_squares"])
def test_axis_flow_carries_profile_along_rows(method):
    g = Grid(17, 13)
    _, Y = g.mesh
    phi = 1.0 + 0.5 * np.sin(3 * Y) + 0.2j * Y
    g1 = np.sqrt(g.trace(phi))
    tr = solve_transport(_const_beta(g), g1, g, method=method)
    np.testing.assert_allclose(tr.xi, phi, atol=1e-12)


def test_upwind_solution_conserves_flux_on_sub_boxes():
    g = Grid(25, 25)
    X, Y = g.mesh
    beta = (1.0 + 0.3 * Y + 0j, 0.2 + 0.1 * X + 0j)
    g1 = g.evaluate_trace(lambda x, y: 1 + 0.2 * x * y + 0j)
    tr = solve_transport(beta, g1, g, method="upwind")
    r = transport_residual(tr.xi, beta, g, g1 ** 2)
    # every interior dual cell balances, hence so does any union of them
    assert np.abs(r[g.interior_mask]).max() < 1e-12
    assert abs(r[5:15, 8:20].sum()) < 1e-11


def test_transport_without_inflow_is_rejected():
    g = Grid(7, 7)
    with pytest.raises(DataConditionError):
        solve_transport(_const_beta(g, 0.0, 0.0), np.ones(g.n_boundary), g)


def test_recover_potential_plane_wave():
    k = 2.0
    errs = []
    for n in (41, 81):
        g = Grid(n, n)
        X, _ = g.mesh
        pot = recover_potential(np.exp(2j * k * X), g, k)
        band = g.interior_band(1)
        errs.append(max(np.abs(pot.eta[band]).max(), np.abs(pot.sigma[band]).max()))
    assert errs[1] < 1e-2
    assert errs[0] / errs[1] == pytest.approx(4.0, abs=0.6)


def test_constant_xi_gives_nonadmissible_eta():
    g = Grid(11, 11)
    pot = recover_potential(np.full(g.shape, 2.0 + 0j), g, 3.0)
    band = g.interior_band(1)
    np.testing.assert_allclose(pot.eta[band], -1.0, atol=1e-12)
    np.testing.assert_allclose(pot.sigma[band], 0.0, atol=1e-12)


def test_reassembly_is_exact(rng):
    g = Grid(21, 21)
    xi = np.exp(1j * rng.random(g.shape)) * (1 + rng.random(g.shape))
    pot = recover_potential(xi, g, 2.7)
    m = pot.mask
    assert np.array_equal(reassemble_potential(pot.eta, pot.sigma, 2.7)[m], pot.q[m])


def test_grueneisen_examples(rng):
    shape = (6, 6)
    xi = (1 + rng.random(shape)) * np.exp(1j * rng.random(shape))
    sig = 0.5 + rng.random(shape)
    gam = 1 + rng.random(shape)
    H1 = gam * sig * np.abs(xi)
    np.testing.assert_allclose(recover_grueneisen(H1, sig, xi), gam, rtol=1e-14)
    np.testing.assert_allclose(recover_grueneisen(3 * H1, sig, xi), 3 * gam, rtol=1e-14)
    assert np.isnan(recover_grueneisen(H1, -sig, xi)).all()


def _pipeline(n):
    g = Grid(n, n)
    eta = make_phantom(g, "gaussian", 0.2, [Inclusion((0.5, 0.5), 0.15, 0.3)])
    sig = make_phantom(g, "gaussian", 0.5, [Inclusion((0.4, 0.6), 0.1, 0.5)])
    gam = make_phantom(g, "gaussian", 1.0, [Inclusion((0.6, 0.4), 0.12, 0.5)])
    m = MediumSet(g, gam, eta, sig, 0.0, chi2_lower=0.0)
    ills = [Illumination(plane_wave(3.0)), Illumination(ramp_plane_wave(3.0, ramp=(1, 0), offset=0.5))]
    d = synthesize(m, 3.0, ills, model="linear", polarized=True, keep_solutions=True)
    return m, d, PolarizedPair.from_dataset(d, g.evaluate_trace(plane_wave(3.0)))


def test_pipeline_recovers_coefficients():
    m, d, pair = _pipeline(101)
    est = DirectReconstructor(k=3.0).fit(pair)
    err = est.errors({"eta": m.eta, "sigma": m.sigma, "gamma_g": m.gamma_g})
    assert err["sigma"] <= 0.10 and err["eta"] <= 0.10 and err["gamma_g"] <= 0.15
    u1 = d.solutions[0].u
    assert rel_l2(est.xi_, u1**2, m.grid) <= 0.05
    assert est.diagnostics_["transport_method"] == "least_squares"
    bx, by = est.beta_
    ref = np.gradient(d.solutions[1].u / u1, m.grid.y, m.grid.x, edge_order=2)
    band = m.grid.interior_band(5)
    assert rel_l2(bx, ref[1], m.grid, band) < 1e-6      # Γσ cancels exactly in the ratio


def test_stability_ratio_of_identical_runs():
    m, d, pair = _pipeline(41)
    est = DirectReconstructor(k=3.0).fit(pair)
    rep = stability_ratio(est, est, pair, pair)
    assert rep["coefficient_diff"] == 0.0 and rep["ratio"] == 0.0


def test_estimator_api():
    est = DirectReconstructor(k=2.0, band=0.1)
    assert est.get_params()["band"] == 0.1
    with pytest.raises(NotFittedError):
        est.coefficients()
    with pytest.raises(ValueError):
        DirectReconstructor(k=-1.0).fit(_pipeline(21)[2])
