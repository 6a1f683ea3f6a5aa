"""Squared-exponential covariance, kernel matrices and spline velocity fields.

The vector-valued covariance between two points is ``k(x, y) * I_d``:
every spatial coordinate is an independent copy of one scalar GP.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import JITTER_MAX, JITTER_START, cholesky_solve, jittered_cholesky
from .errors import DimensionMismatch, DuplicatePoints


def kernel_value(x, y, sigma: float):
    """``exp(-|x - y|^2 / (2 sigma^2))``; broadcasts over leading axes."""
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * sigma * sigma))


def kernel_gradient(x, y, sigma: float):
    """Gradient of :func:`kernel_value` with respect to ``x``."""
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return -(diff / sigma**2) * kernel_value(x, y, sigma)[..., None]


def _sqdist(x, y):
    # (..., P, d) x (..., Q, d) -> (..., P, Q); per-coordinate loop avoids a 4-D temporary
    lead = np.broadcast_shapes(x.shape[:-2], y.shape[:-2])
    if lead:
        # batch axes go innermost so the elementwise loops run over long contiguous rows: (d, P, B)
        xb = np.broadcast_to(x, lead + x.shape[-2:]).reshape((-1,) + x.shape[-2:])
        yb = np.broadcast_to(y, lead + y.shape[-2:]).reshape((-1,) + y.shape[-2:])
        xt = np.ascontiguousarray(xb.transpose(2, 1, 0))
        yt = np.ascontiguousarray(yb.transpose(2, 1, 0))
        out = None
        for c in range(x.shape[-1]):
            diff = np.subtract(xt[c][:, None, :], yt[c][None, :, :])
            np.multiply(diff, diff, out=diff)
            if out is None:
                out = diff
            else:
                out += diff
        return np.ascontiguousarray(out.transpose(2, 0, 1)).reshape(lead + out.shape[:2])
    xt = np.ascontiguousarray(np.moveaxis(x, -1, 0))
    yt = xt if y is x else np.ascontiguousarray(np.moveaxis(y, -1, 0))
    out = None
    for c in range(x.shape[-1]):
        diff = np.subtract(xt[c][..., :, None], yt[c][..., None, :])
        np.multiply(diff, diff, out=diff)
        if out is None:
            out = diff
        else:
            out += diff
    return out


@dataclass(frozen=True)
class SquaredExponentialKernel:
    sigma: float
    dim: int = 2

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"kernel length-scale must be positive, got {self.sigma}")

    def __call__(self, x, y):
        return kernel_value(x, y, self.sigma)

    def gradient(self, x, y):
        return kernel_gradient(x, y, self.sigma)

    def scalar_matrix(self, x, y=None):
        """Scalar Gram matrix ``[k(x_p, y_q)]``, shape ``(..., P, Q)``."""
        x = np.asarray(x, dtype=float)
        y = x if y is None else np.asarray(y, dtype=float)
        out = _sqdist(x, y)
        out *= -0.5 / self.sigma**2
        return np.exp(out, out=out)


@dataclass
class KernelMatrix:
    """Block kernel matrix ``[k(X_i, X_j) I_d]`` over a fixed point set.

    ``scalar`` holds the ``N x N`` Gram matrix; ``entries`` expands it to
    the ``(N d) x (N d)`` block form. Solves use a jittered Cholesky factor.
    """

    points: np.ndarray
    sigma: float
    scalar: np.ndarray
    chol: np.ndarray
    jitter: float

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def entries(self) -> np.ndarray:
        return np.kron(self.scalar, np.eye(self.dim))

    @property
    def jittered_entries(self) -> np.ndarray:
        scale = np.mean(np.diag(self.scalar))
        return self.entries + self.jitter * scale * np.eye(self.scalar.shape[0] * self.dim)

    def solve(self, rhs):
        """Apply ``S^{-1}`` to a point-major vector of shape (..., N*d) or (..., N, d)."""
        rhs = np.asarray(rhs, dtype=float)
        n, d = self.points.shape
        blocks = _as_blocks(rhs, n, d)
        lead = blocks.shape[:-2]
        # move the point axis first so one Cholesky solve handles every column
        cols = np.moveaxis(blocks, -2, 0).reshape(n, -1)
        sol = cholesky_solve(self.chol, cols).reshape((n,) + lead + (d,))
        sol = np.moveaxis(sol, 0, -2)
        return sol.reshape(rhs.shape)


def _as_blocks(a, n, d):
    if a.ndim >= 2 and a.shape[-2:] == (n, d):
        return a
    if a.shape[-1] == n * d:
        return a.reshape(a.shape[:-1] + (n, d))
    raise DimensionMismatch(f"array of shape {a.shape} does not hold {n} points in {d}-D")


def assemble_kernel_matrix(points, sigma: float, jitter_start: float = JITTER_START,
                           jitter_max: float = JITTER_MAX) -> KernelMatrix:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] < 1:
        raise DimensionMismatch("kernel matrix needs at least one point")
    kern = SquaredExponentialKernel(sigma, points.shape[1])
    gram = kern.scalar_matrix(points)
    d2 = _sqdist(points, points)
    iu = np.triu_indices(points.shape[0], 1)
    if np.any(d2[iu] < 1e-18):
        warnings.warn("coincident kernel centres (within 1e-9 mm)", DuplicatePoints, stacklevel=2)
    chol, eps = jittered_cholesky(gram, jitter_start, jitter_max)
    return KernelMatrix(points, float(sigma), gram, chol, eps)


@dataclass
class VelocityField:
    """Stationary spline velocity ``v(x) = sum_j k(x, X_j) alpha_j``.

    ``mu`` (values at the control points) is the optimisation variable;
    ``coefficients`` caches ``alpha = S^{-1} mu``. Both are stored as
    ``(..., N, d)`` arrays; a leading batch axis evaluates several fields
    against the same control points at once.
    """

    control_points: np.ndarray
    mu: np.ndarray
    coefficients: np.ndarray
    kernel: SquaredExponentialKernel
    stationary: bool = field(default=True)

    @classmethod
    def from_mu(cls, control_points, mu, sigma_or_kernel, kmat: KernelMatrix | None = None):
        control_points = np.atleast_2d(np.asarray(control_points, dtype=float))
        n, d = control_points.shape
        kernel = (sigma_or_kernel if isinstance(sigma_or_kernel, SquaredExponentialKernel)
                  else SquaredExponentialKernel(float(sigma_or_kernel), d))
        mu = _as_blocks(np.asarray(mu, dtype=float), n, d)
        if kmat is None:
            kmat = assemble_kernel_matrix(control_points, kernel.sigma)
        return cls(control_points, mu, kmat.solve(mu), kernel)

    @classmethod
    def zero(cls, control_points, sigma):
        control_points = np.atleast_2d(np.asarray(control_points, dtype=float))
        kernel = SquaredExponentialKernel(float(sigma), control_points.shape[1])
        z = np.zeros_like(control_points)
        return cls(control_points, z, z.copy(), kernel)

    @property
    def dim(self) -> int:
        return self.control_points.shape[1]

    def _weights(self, x):
        return self.kernel.scalar_matrix(x, self.control_points)

    def eval(self, x):
        """Velocity at points ``x`` of shape (..., P, d)."""
        x = np.asarray(x, dtype=float)
        return self._weights(x) @ self.coefficients

    def eval_with_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        w = self._weights(x)
        vel = w @ self.coefficients
        # sum_j k_pj alpha_j[a] X_j[b]
        cross = np.stack([w @ (self.coefficients * self.control_points[:, b, None])
                          for b in range(self.dim)], axis=-1)
        jac = -(vel[..., :, None] * x[..., None, :] - cross) / self.kernel.sigma**2
        return vel, jac

    def jacobian(self, x):
        """Spatial Jacobians ``D_x v`` at ``x``, shape (..., P, d, d)."""
        return self.eval_with_jacobian(x)[1]


def velocity_eval(v: VelocityField, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return v.eval(x[None])[..., 0, :]
    return v.eval(x)


def velocity_jacobian(v: VelocityField, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return v.jacobian(x[None])[..., 0, :, :]
    return v.jacobian(x)
