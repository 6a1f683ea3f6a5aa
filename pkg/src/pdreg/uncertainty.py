"""Pointwise posterior uncertainty of a registration.

For the diffeomorphic model every query point is a passive tracer: it is
carried by the optimized drift and feels the correlated noise, but it has
no say in the objective. Its marginal covariance at t = 1 is the query's
diagonal block of the joint LL covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFinite
from .flow import identity_state, propagate_moments
from .registration import RegistrationConfig, RegistrationResult, baseline_marginals, velocity_of

MAX_CHUNK = 256


@dataclass
class UncertaintyField:
    grid_points: np.ndarray
    fc_values: np.ndarray
    marginals: np.ndarray | None = None
    shape: tuple | None = None
    bounds: tuple | None = None

    def __post_init__(self):
        if np.any(self.fc_values < 0):
            raise ValueError("FC values must be non-negative")

    @property
    def boundary_mask(self) -> np.ndarray:
        """Points lying on the outer faces of the regular grid."""
        if self.shape is None:
            raise ValueError("boundary is only defined for regular grids")
        idx = np.indices(self.shape).reshape(len(self.shape), -1)
        sizes = np.asarray(self.shape)[:, None]
        return np.any((idx == 0) | (idx == sizes - 1), axis=0)


def frobenius(marginals) -> np.ndarray:
    m = np.asarray(marginals, dtype=float)
    return np.sqrt(np.sum(m * m, axis=(-2, -1)))


def _diag_blocks(cov, start, count, dim):
    idx = start * dim + np.arange(count * dim)
    sub = cov[np.ix_(idx, idx)].reshape(count, dim, count, dim)
    return sub[np.arange(count), :, np.arange(count), :]


def marginal_covariance(result: RegistrationResult, queries, config: RegistrationConfig,
                        chunk_size: int = MAX_CHUNK) -> np.ndarray:
    """Per-query ``d x d`` covariance of the deformed position at t = 1.

    Queries are propagated in chunks of at most ``chunk_size`` together with
    the landmarks; covariance between different chunks is never formed.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    d = result.dim
    if queries.shape[1] != d:
        raise DimensionMismatch(f"queries are {queries.shape[1]}-D, registration is {d}-D")
    if not np.all(np.isfinite(queries)):
        raise NonFinite("query points must be finite")
    if not 1 <= chunk_size <= MAX_CHUNK:
        raise ValueError(f"chunk_size must lie in [1, {MAX_CHUNK}]")
    if result.kind == "small_deformation":
        return baseline_marginals(result, queries, config)
    v = velocity_of(result, config)
    diffusion = config.diffusion(d)
    landmarks = result.control_points
    n_lm = landmarks.shape[0]
    out = np.empty((queries.shape[0], d, d))
    for start in range(0, queries.shape[0], chunk_size):
        chunk = queries[start:start + chunk_size]
        tracked = np.concatenate([landmarks, chunk])
        final = propagate_moments(v, diffusion, identity_state(tracked), config.grid, keep_history=False).final
        out[start:start + len(chunk)] = _diag_blocks(final.cov, n_lm, len(chunk), d)
    return out


def regular_grid(bounds, resolution):
    """Regular grid over ``bounds = ((lo, hi), ...)``; returns (points, shape).

    Points are ordered with the first axis varying slowest.
    """
    bounds = [tuple(map(float, b)) for b in bounds]
    res = [int(resolution)] * len(bounds) if np.isscalar(resolution) else [int(r) for r in resolution]
    if len(res) != len(bounds):
        raise DimensionMismatch("resolution and bounds disagree on the dimension")
    if min(res) < 2:
        raise ValueError("grid resolution must be at least 2 per axis")
    if any(not hi > lo for lo, hi in bounds):
        raise ValueError("grid bounds must satisfy lo < hi")
    axes = [np.linspace(lo, hi, r) for (lo, hi), r in zip(bounds, res)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1), tuple(res)


def fc_field(result: RegistrationResult, bounds, resolution, config: RegistrationConfig,
             keep_marginals: bool = False, chunk_size: int = MAX_CHUNK) -> UncertaintyField:
    """Frobenius norm of the marginal covariance over a regular grid (mm^2)."""
    points, shape = regular_grid(bounds, resolution)
    if len(shape) != result.dim:
        raise DimensionMismatch("grid dimension differs from the registration")
    marg = marginal_covariance(result, points, config, chunk_size)
    return UncertaintyField(points, frobenius(marg), marg if keep_marginals else None, shape,
                            tuple(tuple(map(float, b)) for b in bounds))
