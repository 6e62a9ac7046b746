import numpy as np
import pytest

from shgtat.grid import (Grid, divergence, gradient, laplacian, norm_l2, norm_linf, normal_derivative,
                         normal_derivative_stencil, norms, rel_l2)


def test_laplacian_of_constant_vanishes():
    g = Grid(11, 9)
    lap = laplacian(np.full(g.shape, 3.7 + 1j), g)
    assert np.abs(lap[g.interior_mask]).max() < 1e-10


def test_laplacian_exact_on_quadratic():
    g = Grid(21, 21)
    X, Y = g.mesh
    lap = laplacian(X**2 + Y**2, g)
    np.testing.assert_allclose(lap[g.interior_mask], 4.0, rtol=0, atol=1e-9)


def test_laplacian_second_order():
    errs = []
    for n in (41, 81):
        g = Grid(n, n)
        X, Y = g.mesh
        f = np.sin(np.pi * X) * np.sin(np.pi * Y)
        errs.append(np.abs(laplacian(f, g) + 2 * np.pi**2 * f)[g.interior_mask].max())
    assert errs[0] / errs[1] == pytest.approx(4.0, abs=0.3)


def test_gradient_exact_on_linear():
    g = Grid(9, 13)
    X, Y = g.mesh
    gx, gy = gradient(2 * X + 3 * Y, g)
    np.testing.assert_allclose(gx, 2.0, atol=1e-10)
    np.testing.assert_allclose(gy, 3.0, atol=1e-10)


def test_gradient_second_order():
    errs = []
    for n in (41, 81):
        g = Grid(n, n)
        X, Y = g.mesh
        gx, gy = gradient(np.sin(np.pi * X) * np.cos(np.pi * Y), g)
        ex = np.pi * np.cos(np.pi * X) * np.cos(np.pi * Y)
        ey = -np.pi * np.sin(np.pi * X) * np.sin(np.pi * Y)
        errs.append(max(np.abs(gx - ex).max(), np.abs(gy - ey).max()))
    assert errs[0] / errs[1] == pytest.approx(4.0, abs=0.5)


def test_divergence_examples():
    g = Grid(15, 15)
    X, Y = g.mesh
    np.testing.assert_allclose(divergence(np.full(g.shape, 2.0), np.full(g.shape, -1.0), g), 0.0, atol=1e-12)
    np.testing.assert_allclose(divergence(X, Y, g), 2.0, atol=1e-10)
    f = np.sin(np.pi * X) * np.sin(np.pi * Y)
    d = divergence(*gradient(f, g), g)
    assert np.abs(d - laplacian(f, g))[g.interior_band(2)].max() < 0.5


def test_normal_derivative_of_x():
    g = Grid(11, 11)
    X, _ = g.mesh
    dn = g.extend(normal_derivative(X, g))
    np.testing.assert_allclose(dn[1:-1, -1], 1.0, atol=1e-12)
    np.testing.assert_allclose(dn[1:-1, 0], -1.0, atol=1e-12)
    np.testing.assert_allclose(dn[0, 1:-1], 0.0, atol=1e-12)
    np.testing.assert_allclose(dn[-1, 1:-1], 0.0, atol=1e-12)


def test_normal_derivative_matches_analytic_and_stencil():
    errs = []
    for n in (41, 81):
        g = Grid(n, n)
        X, Y = g.mesh
        f = np.exp(X + Y)
        nrm = g.boundary_normals
        exact = g.trace(f) * (nrm[:, 0] + nrm[:, 1])
        dn = normal_derivative(f, g)
        errs.append(np.abs(dn - exact).max())
        np.testing.assert_allclose(normal_derivative_stencil(g) @ f.ravel(), dn, rtol=0, atol=1e-11)
    assert errs[0] / errs[1] == pytest.approx(4.0, abs=0.6)


def test_boundary_ring_counter_clockwise():
    g = Grid(4, 3, x0=1.0, y0=2.0, lx=3.0, ly=2.0)
    X, Y = g.mesh
    pts = np.stack([g.trace(X), g.trace(Y)], axis=1)
    assert tuple(pts[0]) == (1.0, 2.0)
    assert len(pts) == g.n_boundary == 10
    # signed area of the ring polygon is positive for counter-clockwise order
    x, y = pts[:, 0], pts[:, 1]
    assert 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) == pytest.approx(6.0)


def test_extend_and_trace_roundtrip(rng):
    g = Grid(7, 5)
    t = rng.standard_normal(g.n_boundary)
    np.testing.assert_array_equal(g.trace(g.extend(t)), t)


def test_norm_examples():
    g = Grid(101, 101)
    X, _ = g.mesh
    assert abs(norm_l2(np.ones(g.shape), g) - 1.0) <= 0.01 + 1e-12
    assert rel_l2(X + 1, X + 1, g) == 0.0
    assert norm_linf(X) == 1.0
    out = norms(X, g, ref=X)
    assert set(out) == {"l2", "linf", "rel_l2"}


def test_rel_l2_rejects_zero_reference():
    g = Grid(5, 5)
    with pytest.raises(ValueError):
        rel_l2(np.ones(g.shape), np.zeros(g.shape), g)


def test_refine_restrict_roundtrip():
    g = Grid(6, 5)
    f = g.refine(3)
    assert (f.nx, f.ny) == (16, 13)
    X, Y = f.mesh
    np.testing.assert_allclose(g.restrict(X, 3), g.mesh[0], atol=1e-14)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(2, 5)
    with pytest.raises(ValueError):
        Grid(5, 5, lx=0.0)
