"""Dense SPD linear algebra used by the moment equations.

All routines accept stacked matrices of shape ``(..., n, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .errors import NotSpd

JITTER_START = 1e-10
JITTER_MAX = 1e-6
NEG_EIG_TOL = 1e-10
ZERO_NORM = 1e-14


@dataclass(frozen=True)
class GaussianState:
    """Mean and equal-time covariance of a set of tracked points.

    ``mean`` is flattened point-major, i.e. ``mean[p * d + c]`` is
    coordinate ``c`` of point ``p``.
    """

    mean: np.ndarray
    cov: np.ndarray
    time: float = 0.0

    @property
    def n_coords(self) -> int:
        return self.mean.shape[-1]

    def points(self, dim: int) -> np.ndarray:
        return self.mean.reshape(-1, dim)

    def marginal(self, index: int, dim: int) -> np.ndarray:
        sl = slice(index * dim, (index + 1) * dim)
        return self.cov[sl, sl]

    @property
    def second_moment(self) -> np.ndarray:
        return self.cov + np.outer(self.mean, self.mean)


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _trace(a):
    return np.trace(a, axis1=-2, axis2=-1)


def _check_eigs(w, a):
    tr = np.abs(_trace(a))
    bad = w[..., 0] < -NEG_EIG_TOL * tr
    if np.any(bad):
        raise NotSpd(f"matrix has eigenvalue {np.min(w[..., 0]):.3e} below tolerance")


def matrix_sqrt(a, jitter: float = JITTER_START) -> np.ndarray:
    """Principal (symmetric) square root of an SPSD matrix.

    ``jitter * mean(diag)`` is added to the spectrum before taking roots;
    slightly negative eigenvalues within ``-1e-10 * trace`` are clipped.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    w, q = np.linalg.eigh(a)
    _check_eigs(w, a)
    shift = jitter * np.mean(np.diagonal(a, axis1=-2, axis2=-1), axis=-1)
    w = np.clip(w + shift[..., None], 0.0, None)
    return (q * np.sqrt(w)[..., None, :]) @ np.swapaxes(q, -1, -2)


def sqrt_derivative(a, da, jitter: float = JITTER_START) -> np.ndarray:
    """Differential of the principal square root at ``a`` in direction ``da``.

    Solves the Sylvester equation ``sqrt(a) X + X sqrt(a) = da`` in the
    eigenbasis of ``a``.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    da = symmetrize(np.asarray(da, dtype=float))
    a_norm = np.linalg.norm(a, axis=(-2, -1))
    if np.all(a_norm < ZERO_NORM):
        if np.all(np.linalg.norm(da, axis=(-2, -1)) < ZERO_NORM):
            return np.zeros_like(da)
        raise NotSpd("square root is not differentiable at the zero matrix")
    w, q = np.linalg.eigh(a)
    floor = jitter * np.abs(_trace(a)) / a.shape[-1]
    if np.any(w[..., 0] <= floor):
        raise NotSpd("square-root derivative needs a strictly positive definite base point")
    s = np.sqrt(w)
    qt = np.swapaxes(q, -1, -2)
    rotated = qt @ da @ q
    x = rotated / (s[..., :, None] + s[..., None, :])
    return q @ x @ qt


def jittered_cholesky(a, start: float = JITTER_START, stop: float = JITTER_MAX):
    """Cholesky factor of ``a + eps * mean(diag) * I`` with escalating ``eps``.

    Returns ``(L, eps)``; raises NotSpd once ``eps`` would exceed ``stop``.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    n = a.shape[-1]
    scale = np.mean(np.diagonal(a, axis1=-2, axis2=-1), axis=-1)
    scale = np.where(scale > 0, scale, 1.0)
    eps = start
    while eps <= stop * (1 + 1e-9):
        try:
            shifted = a + (eps * scale)[..., None, None] * np.eye(n)
            return np.linalg.cholesky(shifted), eps
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise NotSpd(f"Cholesky failed with jitter up to {stop:g}")


def cholesky_solve(chol, b):
    """Solve ``(L L^T) x = b`` for a lower-triangular ``L``; ``b`` is (n,) or (n, k)."""
    return cho_solve((chol, True), b)


def psd_floor(cov, rel_floor: float = 0.0):
    """Symmetrize and clip negative eigenvalues; returns ``(cov, floored)``.

    A cheap Cholesky probe on ``cov + 1e-12 * trace * I`` skips the
    eigendecomposition whenever the matrix is already PSD to that margin.
    """
    cov = symmetrize(cov)
    n = cov.shape[-1]
    tr = np.abs(_trace(cov))
    if not np.any(tr > 0):
        return cov, False
    probe = cov + (1e-12 * tr + 1e-300)[..., None, None] * np.eye(n)
    try:
        np.linalg.cholesky(probe)
        return cov, False
    except np.linalg.LinAlgError:
        pass
    if cov.ndim == 2:
        return _clip_eigs(cov, rel_floor * tr / n), True
    # floor each matrix on its own so batch members never influence each other
    out = cov.copy()
    floored = False
    for idx in np.ndindex(cov.shape[:-2]):
        try:
            np.linalg.cholesky(probe[idx])
        except np.linalg.LinAlgError:
            out[idx] = _clip_eigs(cov[idx], rel_floor * tr[idx] / n)
            floored = True
    return out, floored


def _clip_eigs(a, lower):
    w, q = np.linalg.eigh(a)
    w = np.clip(w, lower, None)
    return symmetrize((q * w) @ q.T)
