import numpy as np
import pytest

from shgtat import Grid, MediumSet, make_phantom
from shgtat.phantoms import Inclusion


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return Grid(21, 17, lx=1.0, ly=0.8)


def smooth_media(grid, chi2=1.0):
    eta = make_phantom(grid, "gaussian", 0.2, [Inclusion((0.5, 0.5), 0.15, 0.3)])
    sig = make_phantom(grid, "gaussian", 0.5, [Inclusion((0.4, 0.6), 0.1, 0.5)])
    gam = make_phantom(grid, "gaussian", 1.0, [Inclusion((0.6, 0.4), 0.12, 0.5)])
    return MediumSet(grid, gam, eta, sig, chi2, chi2_lower=0.0)


@pytest.fixture
def media_factory():
    return smooth_media
