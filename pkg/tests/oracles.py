"""Reference implementations used only by the tests.

Each routine is written independently of the package internals (plain
loops, scipy solvers, closed forms) so agreement is evidence of
correctness rather than of shared code.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm, solve_sylvester, sqrtm


def kernel_loop(x, y, sigma):
    return math.exp(-sum((a - b) ** 2 for a, b in zip(x, y)) / (2.0 * sigma * sigma))


def spline_velocity_loop(ctrl, alpha, sigma, x):
    out = np.zeros(len(x))
    for j in range(len(ctrl)):
        out += kernel_loop(x, ctrl[j], sigma) * np.asarray(alpha[j])
    return out


def spline_jacobian_loop(ctrl, alpha, sigma, x):
    d = len(x)
    jac = np.zeros((d, d))
    for j in range(len(ctrl)):
        k = kernel_loop(x, ctrl[j], sigma)
        grad = -(np.asarray(x) - ctrl[j]) / sigma**2 * k
        jac += np.outer(alpha[j], grad)
    return jac


def principal_sqrt(a):
    return np.real(sqrtm(a))


def sqrt_differential(a, da):
    r = principal_sqrt(a)
    return solve_sylvester(r, r, da)


def central_difference(f, x, h):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def ou_moments(a, c, x0, t):
    """Mean and variance of ``dx = a x dt + c dW`` started at ``x0``."""
    mean = x0 * math.exp(a * t)
    var = c * c * (math.exp(2 * a * t) - 1.0) / (2 * a)
    return mean, var


def rotation_flow(omega, x, t=1.0):
    gen = np.array([[0.0, -omega], [omega, 0.0]])
    return expm(gen * t) @ np.asarray(x)


def ll_covariance_rhs_loop(ctrl, alpha, sigma, eta, means, cov):
    """Covariance derivative for the kernel diffusion, one pair of points at a time."""
    p_count, d = means.shape
    lam = cov.reshape(p_count, d, p_count, d)
    out = np.zeros_like(lam)
    jacs = [spline_jacobian_loop(ctrl, alpha, sigma, m) for m in means]
    for p in range(p_count):
        for q in range(p_count):
            blk = jacs[p] @ lam[p, :, q, :] + lam[p, :, q, :] @ jacs[q].T
            blk += eta**2 * kernel_loop(means[p], means[q], sigma) * np.eye(d)
            out[p, :, q, :] = blk
    return out.reshape(cov.shape)


def ll_moments_scipy(ctrl, alpha, sigma, eta, points, rtol=1e-10, atol=1e-12):
    """Integrate the mean and covariance equations with an adaptive scipy solver."""
    points = np.asarray(points, dtype=float)
    p_count, d = points.shape
    n = p_count * d

    def rhs(_, y):
        m = y[:n].reshape(p_count, d)
        c = y[n:].reshape(n, n)
        dm = np.array([spline_velocity_loop(ctrl, alpha, sigma, x) for x in m]).reshape(-1)
        dc = ll_covariance_rhs_loop(ctrl, alpha, sigma, eta, m, c)
        return np.concatenate([dm, dc.reshape(-1)])

    y0 = np.concatenate([points.reshape(-1), np.zeros(n * n)])
    sol = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=rtol, atol=atol)
    y = sol.y[:, -1]
    return y[:n], y[n:].reshape(n, n)


def gp_regression_dense(ctrl, targets, sigma, noise_var, queries, eta=1.0):
    """Displacement mean and per-query variance by dense linear solves."""
    ctrl = np.asarray(ctrl, dtype=float)
    gram = np.array([[kernel_loop(a, b, sigma) for b in ctrl] for a in ctrl])
    if noise_var is not None:
        gram = gram + np.diag(noise_var)
    disp = np.asarray(targets) - ctrl
    weights = np.linalg.solve(gram, disp)
    kq = np.array([[kernel_loop(q, c, sigma) for c in ctrl] for q in queries])
    mean = kq @ weights
    var = eta**2 * (1.0 - np.einsum("ij,ji->i", kq, np.linalg.solve(gram, kq.T)))
    return mean, var


def det_loop(mapping, points, h):
    """Jacobian determinants by explicit central differences, one point at a time."""
    out = []
    for x in np.atleast_2d(points):
        jac = central_difference(lambda z: mapping(z[None])[0], x, h)
        out.append(np.linalg.det(jac))
    return np.array(out)
