"""Simulation and reconstruction for second-harmonic thermoacoustic imaging."""

from .grid import Grid, divergence, gradient, laplacian, normal_derivative, norms, rel_l2
from .phantoms import AdmissibilityError, Inclusion, make_phantom
from .forward import (BCSpec, CoupledOptions, HelmholtzOperator, MediumSet, SHGSolution,
                      SolverError, DivergenceError, potentials, solve_scalar, solve_coupled,
                      solve_one_way, residuals)
from .data import (DataSet, Illumination, add_noise, boundary_bump, constant, internal_data,
                   plane_wave, polarize, polarized_data, ramp_plane_wave, synthesize)
from .linearize import ConvergenceReport, EpsFamily, LinearizedBundle, certify_expansion, linearize
from .direct import DataConditionError, DirectReconstructor, PolarizedPair, solve_transport
from .gamma_system import (EllipticityError, GammaSystemInput, GammaSystemReconstructor,
                           assemble_and_solve, check_ellipticity, gamma_from_u2, rotate_for_ellipticity)
from .optim import (EXPERIMENTS, AdjointReconstructor, GradientCheckError, OneWayProblem, OptData,
                    check_gradient, lbfgs_minimize)

__version__ = "0.1.0"
