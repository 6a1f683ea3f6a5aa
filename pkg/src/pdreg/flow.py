"""Deterministic flows and locally linearized moment propagation.

Tracked points evolve under ``d phi = v(phi) dt + G(phi) dW`` where the
Wiener increments of two points are correlated by the diffusion's
correlation function (the kernel for :class:`KernelDiffusion`). The mean
and equal-time covariance are integrated together; drift and noise are
re-linearized at the current mean of every tracked point at every stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GaussianState, matrix_sqrt, psd_floor, sqrt_derivative, symmetrize
from .errors import DimensionMismatch, NonFinite
from .kernel import SquaredExponentialKernel


@dataclass(frozen=True)
class TimeGrid:
    steps: int = 64

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError(f"time grid needs at least one step, got {self.steps}")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) / self.steps


class LinearField:
    """Affine drift ``v(x) = B x + c``; the LL expansion of it is exact."""

    def __init__(self, matrix, offset=None):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        d = self.matrix.shape[0]
        self.offset = np.zeros(d) if offset is None else np.asarray(offset, dtype=float)

    def eval(self, x):
        return np.asarray(x) @ self.matrix.T + self.offset

    def jacobian(self, x):
        x = np.asarray(x)
        return np.broadcast_to(self.matrix, x.shape + (x.shape[-1],)).copy()


class Diffusion:
    """Noise model: per-point factor ``G(x)`` plus cross-point correlation.

    The increment covariance between tracked points ``p`` and ``q`` is
    ``G(x_p) rho(x_p, x_q) G(x_q)^T dt``. Subclasses provide
    :meth:`marginal_cov` and :meth:`correlation`; spatially varying
    marginals also override :meth:`marginal_cov_derivative`.
    """

    #: True when the marginal covariance does not depend on position.
    constant_marginal = False

    def marginal_cov(self, x):
        raise NotImplementedError

    def marginal_cov_derivative(self, x):
        """``d Sigma(x) / d x_i`` stacked as (..., P, d_i, d, d)."""
        x = np.asarray(x)
        d = x.shape[-1]
        return np.zeros(x.shape + (d, d))

    def correlation(self, x):
        raise NotImplementedError

    def marginal_sqrt(self, x):
        return matrix_sqrt(self.marginal_cov(x))

    def sqrt_derivatives(self, x):
        """``S^i = d sqrt(Sigma)(x) / d x_i``, shape (..., P, d_i, d, d)."""
        cov = self.marginal_cov(x)
        return sqrt_derivative(cov[..., None, :, :], self.marginal_cov_derivative(x))


class KernelDiffusion(Diffusion):
    """Noise drawn from the velocity prior: ``Sigma(x, y) = eta^2 k(x, y) I``."""

    constant_marginal = True  # k(x, x) = 1 for a stationary kernel

    def __init__(self, kernel: SquaredExponentialKernel, amplitude: float = 1.0):
        if amplitude < 0:
            raise ValueError("noise amplitude must be non-negative")
        self.kernel = kernel
        self.amplitude = float(amplitude)

    def marginal_cov(self, x):
        x = np.asarray(x)
        d = x.shape[-1]
        return np.broadcast_to(self.amplitude**2 * np.eye(d), x.shape[:-1] + (d, d)).copy()

    def correlation(self, x):
        return self.kernel.scalar_matrix(x)


class ConstantDiffusion(Diffusion):
    """Independent additive noise ``s I`` on every tracked point."""

    constant_marginal = True
    independent = True

    def __init__(self, scale: float = 1.0):
        self.amplitude = float(scale)

    def marginal_cov(self, x):
        x = np.asarray(x)
        d = x.shape[-1]
        return np.broadcast_to(self.amplitude**2 * np.eye(d), x.shape[:-1] + (d, d)).copy()

    def correlation(self, x):
        x = np.asarray(x)
        return np.broadcast_to(np.eye(x.shape[-2]), x.shape[:-2] + (x.shape[-2],) * 2).copy()


def as_diffusion(noise) -> Diffusion:
    if isinstance(noise, SquaredExponentialKernel):
        return KernelDiffusion(noise, 1.0)
    return noise


@dataclass
class LLCoefficients:
    """Affine expansion of drift and noise factor around ``center = (t0, x0)``.

    ``v(x) ~ A x + a`` and ``G(x) ~ sum_i S_list[i] x_i + R``.
    """

    A: np.ndarray
    a: np.ndarray
    S_list: np.ndarray
    R: np.ndarray
    center: tuple


def _drift_terms(drift, x):
    if hasattr(drift, "eval_with_jacobian"):
        return drift.eval_with_jacobian(x)
    return drift.eval(x), drift.jacobian(x)


def _linearize(drift, diffusion, x):
    vel, jac = _drift_terms(drift, x)
    return vel, jac, diffusion.marginal_sqrt(x), diffusion.sqrt_derivatives(x)


def ll_coefficients(v, diffusion, t0: float, x0) -> LLCoefficients:
    """Locally linearized coefficients at one point ``x0``.

    The time-derivative terms vanish: velocities are stationary and the
    noise covariance is time-invariant.
    """
    diffusion = as_diffusion(diffusion)
    x0 = np.asarray(x0, dtype=float)
    vel, jac, g, s = _linearize(v, diffusion, x0[None])
    vel, jac, g, s = vel[..., 0, :], jac[..., 0, :, :], g[..., 0, :, :], s[..., 0, :, :, :]
    a = vel - jac @ x0
    r = g - np.einsum("...iab,i->...ab", s, x0)
    return LLCoefficients(jac, a, s, r, (float(t0), x0))


def _moment_rhs(drift, diffusion, mean, cov, dim):
    """Time derivatives of (mean, covariance) under the LL closure."""
    n_pts = mean.shape[-2]
    n = n_pts * dim
    vel, jac = _drift_terms(drift, mean)
    # rows of A_p Lambda_pq for every p; adding the transpose supplies Lambda_pq A_q^T
    al = (jac @ cov.reshape(cov.shape[:-2] + (n_pts, dim, n))).reshape(cov.shape)
    dlam = al + np.swapaxes(al, -1, -2)
    rho = diffusion.correlation(mean)
    blocks = dlam.reshape(dlam.shape[:-2] + (n_pts, dim, n_pts, dim))
    if diffusion.constant_marginal:
        # G_p G_q^T = Sigma for every pair, and all S^i vanish
        sig = diffusion.marginal_cov(mean[..., :1, :])[..., 0, :, :]
        for a in range(dim):
            for b in range(dim):
                blocks[..., :, a, :, b] += rho * sig[..., a, b, None, None]
    else:
        lam = cov.reshape(blocks.shape)
        g = diffusion.marginal_sqrt(mean)
        s = diffusion.sqrt_derivatives(mean)
        noise = np.einsum("...pab,...qcb->...paqc", g, g)
        # sum_ij Lambda_pq[i, j] S_p^i (S_q^j)^T
        noise = noise + np.einsum("...piab,...piqj,...qjcb->...paqc", s, lam, s)
        blocks += rho[..., :, None, :, None] * noise
    return vel, dlam


@dataclass
class MomentTrajectory:
    states: list
    tracked_points: int
    dim: int
    floor_events: int = 0
    steps: int = 0
    history: bool = field(default=True)

    @property
    def final(self) -> GaussianState:
        return self.states[-1]


def _check_finite(arr, step):
    if not np.all(np.isfinite(arr)):
        raise NonFinite("moment integration produced non-finite values", step)


def integrate_moments(drift, diffusion, mean, cov, grid: TimeGrid, keep_history=True):
    """Classic RK4 on the coupled (mean, covariance) system.

    ``mean`` has shape (..., P, d) and ``cov`` (..., P d, P d); batched
    drifts broadcast against them. Returns ``(means, covs, floor_events)``
    where the lists hold every node (or only the last one).
    """
    diffusion = as_diffusion(diffusion)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    dim = mean.shape[-1]
    h = grid.dt
    means, covs = [mean], [cov]
    floors = 0
    for k in range(grid.steps):
        k1m, k1c = _moment_rhs(drift, diffusion, mean, cov, dim)
        k2m, k2c = _moment_rhs(drift, diffusion, mean + 0.5 * h * k1m, cov + 0.5 * h * k1c, dim)
        k3m, k3c = _moment_rhs(drift, diffusion, mean + 0.5 * h * k2m, cov + 0.5 * h * k2c, dim)
        k4m, k4c = _moment_rhs(drift, diffusion, mean + h * k3m, cov + h * k3c, dim)
        mean = mean + (h / 6.0) * (k1m + 2.0 * k2m + 2.0 * k3m + k4m)
        cov = cov + (h / 6.0) * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
        _check_finite(mean, k + 1)
        _check_finite(cov, k + 1)
        cov, floored = psd_floor(cov)
        floors += int(floored)
        if keep_history:
            means.append(mean)
            covs.append(cov)
    if not keep_history:
        means, covs = [mean], [cov]
    return means, covs, floors


def propagate_moments(v, diffusion, initial: GaussianState, grid: TimeGrid,
                      keep_history: bool = True) -> MomentTrajectory:
    """Gaussian approximation of the stochastic flow of the tracked points.

    ``initial.mean`` is point-major of length ``P * d``; the spatial
    dimension is taken from the velocity field.
    """
    dim = _field_dim(v, initial)
    n = initial.mean.shape[-1]
    if n % dim or initial.cov.shape[-2:] != (n, n):
        raise DimensionMismatch(f"state of size {n} is incompatible with dimension {dim}")
    mean0 = initial.mean.reshape(initial.mean.shape[:-1] + (n // dim, dim))
    means, covs, floors = integrate_moments(v, diffusion, mean0, initial.cov, grid, keep_history)
    nodes = grid.nodes if keep_history else grid.nodes[-1:]
    states = [GaussianState(m.reshape(m.shape[:-2] + (n,)), symmetrize(c), float(t))
              for m, c, t in zip(means, covs, nodes)]
    return MomentTrajectory(states, n // dim, dim, floors, grid.steps, keep_history)


def _field_dim(v, initial):
    if hasattr(v, "dim"):
        return v.dim
    if hasattr(v, "matrix"):
        return v.matrix.shape[0]
    raise DimensionMismatch("cannot infer spatial dimension of the drift")


def identity_state(points) -> GaussianState:
    """Deterministic start: mean at the points, zero covariance."""
    points = np.asarray(points, dtype=float)
    n = points.size
    return GaussianState(points.reshape(-1).copy(), np.zeros((n, n)), 0.0)


def flow_mean(v, points, grid: TimeGrid) -> np.ndarray:
    """RK4 flow of ``dx/dt = v(x)`` from the identity; returns (M+1, ..., P, d)."""
    x = np.asarray(points, dtype=float)
    h = grid.dt
    out = [x]
    for k in range(grid.steps):
        k1 = v.eval(x)
        k2 = v.eval(x + 0.5 * h * k1)
        k3 = v.eval(x + 0.5 * h * k2)
        k4 = v.eval(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NonFinite("flow produced non-finite coordinates", k + 1)
        out.append(x)
    return np.stack(out)


def grid_pitch(points) -> float:
    """Smallest positive spacing between distinct coordinates along any axis."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    pitches = []
    for c in range(points.shape[1]):
        u = np.unique(points[:, c])
        if u.size > 1:
            pitches.append(np.min(np.diff(u)))
    if not pitches:
        raise ValueError("cannot infer a grid pitch from a single point")
    return float(min(pitches))


def map_jacobian_determinants(mapping, points, h: float) -> np.ndarray:
    """Central-difference Jacobian determinants of ``mapping`` at ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    g, d = points.shape
    offsets = np.concatenate([np.eye(d) * h, -np.eye(d) * h])
    shifted = (points[:, None, :] + offsets[None]).reshape(-1, d)
    mapped = np.asarray(mapping(shifted)).reshape(g, 2 * d, d)
    jac = (mapped[:, :d, :] - mapped[:, d:, :]) / (2.0 * h)  # [g, column, row]
    dets = np.linalg.det(np.swapaxes(jac, -1, -2))
    if not np.all(np.isfinite(dets)):
        raise NonFinite("Jacobian determinant is not finite")
    return dets


def jacobian_determinant_grid(v, grid_points, time_grid: TimeGrid, h: float | None = None):
    """Determinants of the spatial Jacobian of the mean map at ``grid_points``.

    The difference spacing defaults to a tenth of the grid pitch.
    """
    grid_points = np.atleast_2d(np.asarray(grid_points, dtype=float))
    if not np.all(np.isfinite(grid_points)):
        raise NonFinite("grid points must be finite")
    if h is None:
        h = grid_pitch(grid_points) / 10.0
    return map_jacobian_determinants(lambda x: flow_mean(v, x, time_grid)[-1], grid_points, h)
