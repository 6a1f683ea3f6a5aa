"""Probabilistic diffeomorphic landmark registration with LL moment propagation."""

__version__ = "0.1.0"

from .core import GaussianState, matrix_sqrt, sqrt_derivative
from .errors import (BadShapeParams, DimensionMismatch, DuplicatePoints, FormatError, NonFinite,
                     NotConverged, NotSpd, OutputExists, PdregError, TooFewSamples)
from .flow import (KernelDiffusion, TimeGrid, flow_mean, identity_state, jacobian_determinant_grid,
                   ll_coefficients, propagate_moments)
from .kernel import (KernelMatrix, SquaredExponentialKernel, VelocityField, assemble_kernel_matrix,
                     kernel_gradient, kernel_value, velocity_eval, velocity_jacobian)
from .landmarks import LandmarkSet, match_landmarks
from .oracle import compare_ll_vs_mc, empirical_moments, euler_maruyama_sample, run_validation
from .registration import (RegistrationConfig, RegistrationResult, expected_data_term, gradient,
                           kl_term, loo_validate, objective, register, small_deformation_register)
from .synthetic import generate_synthetic
from .uncertainty import UncertaintyField, fc_field, marginal_covariance

__all__ = [name for name in dir() if not name.startswith("_")]
