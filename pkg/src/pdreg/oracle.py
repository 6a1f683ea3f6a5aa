"""Euler-Maruyama Monte-Carlo reference for the moment equations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import JITTER_START, GaussianState, jittered_cholesky, matrix_sqrt
from .errors import NonFinite, TooFewSamples
from .flow import KernelDiffusion, TimeGrid, as_diffusion, identity_state, propagate_moments
from .kernel import VelocityField, assemble_kernel_matrix
from .synthetic import shape_points

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, index: int) -> int:
    return splitmix64((int(base) + int(index)) & _MASK64)


@dataclass
class SamplePath:
    endpoint: np.ndarray
    seed: int


@dataclass
class MomentComparison:
    mean_distance: float
    cov_frobenius_diff: float
    baseline_variance: float
    n_samples: int
    n_steps: int


class _KeyedNormals:
    """Standard normals from a Philox stream keyed by a 64-bit seed.

    One generator is re-keyed per seed, which gives the same stream as
    ``Philox(key=seed)`` without rebuilding the generator each time.
    """

    def __init__(self):
        self._bits = np.random.Philox(key=0)
        self._gen = np.random.Generator(self._bits)
        self._fresh = self._bits.state

    def draw(self, seed, shape, out=None):
        state = dict(self._fresh)
        state["state"] = {"counter": np.zeros(4, np.uint64), "key": np.array([seed, 0], np.uint64)}
        self._bits.state = state
        return self._gen.standard_normal(shape, out=out)


def _gram(x, y, sigma):
    """Gaussian kernel values through the ``|x|^2 + |y|^2 - 2 x.y`` expansion.

    About 3x faster than the direct difference form on large batches and
    within 1e-14 of it. Products are taken per matrix, so a path never
    depends on the other paths in its batch.
    """
    c = -0.5 / sigma**2
    g = x @ (np.swapaxes(y, -1, -2) * (-2.0 * c))
    g += c * _sq_norm(x)[..., :, None]
    g += c * _sq_norm(y)[..., None, :]
    np.minimum(g, 0.0, out=g)
    return np.exp(g, out=g)


def _sq_norm(x):
    # explicit loop over the short coordinate axis; a reduction over it is far slower
    out = x[..., 0] * x[..., 0]
    for i in range(1, x.shape[-1]):
        out += x[..., i] * x[..., i]
    return out


def _correlation_factor(rho, method):
    if method == "sqrt":
        return matrix_sqrt(rho)
    try:
        # correlations have unit diagonal, so this is the first rung of the jitter ladder
        jittered = rho.copy()
        np.einsum("...ii->...i", jittered)[...] += JITTER_START
        return np.linalg.cholesky(jittered)
    except np.linalg.LinAlgError:
        # escalate per matrix so the result does not depend on batch composition
        out = np.empty_like(rho)
        for idx in np.ndindex(rho.shape[:-2]):
            out[idx] = jittered_cholesky(rho[idx])[0]
        return out


def euler_maruyama_batch(v, diffusion, points, grid: TimeGrid, seeds, factor: str = "cholesky",
                         batch_size: int = 4096) -> np.ndarray:
    """Endpoints at t = 1 for one sample path per seed, shape (S, P, d).

    Each path draws its own standard normals from ``Philox(key=seed)``, so the
    output for a seed never depends on which other seeds share its batch.
    ``factor`` picks the square root of the joint correlation used for the
    increments: ``"cholesky"`` (same law, faster) or the principal ``"sqrt"``.
    """
    diffusion = as_diffusion(diffusion)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n_pts, dim = points.shape
    seeds = [int(s) for s in seeds]
    h = grid.dt
    root_h = np.sqrt(h)
    independent = getattr(diffusion, "independent", False)
    out = np.empty((len(seeds), n_pts, dim))
    g0 = matrix_sqrt(diffusion.marginal_cov(points[:1]))[0] if diffusion.constant_marginal else None
    iso = g0 is not None and np.array_equal(g0, g0[0, 0] * np.eye(dim))
    spline = isinstance(v, VelocityField) and v.coefficients.ndim == 2
    kernel_noise = isinstance(diffusion, KernelDiffusion)
    normals = _KeyedNormals()
    for start in range(0, len(seeds), batch_size):
        chunk = seeds[start:start + batch_size]
        xi = np.empty((len(chunk), grid.steps, n_pts, dim))
        for i, s in enumerate(chunk):
            normals.draw(s, (grid.steps, n_pts, dim), out=xi[i])
        if g0 is not None:
            # the marginal factor acts on coordinates and commutes with the correlation factor
            xi = xi * (root_h * g0[0, 0]) if iso else (xi @ g0.T) * root_h
        x = np.broadcast_to(points, (len(chunk), n_pts, dim)).copy()
        for k in range(grid.steps):
            vel = _gram(x, v.control_points, v.kernel.sigma) @ v.coefficients if spline else v.eval(x)
            z = xi[:, k]
            if not independent:
                rho = _gram(x, x, diffusion.kernel.sigma) if kernel_noise else diffusion.correlation(x)
                z = _correlation_factor(rho, factor) @ z
            if g0 is None:
                z = root_h * np.einsum("spab,spb->spa", diffusion.marginal_sqrt(x), z)
            x += h * vel
            x += z
            if not np.all(np.isfinite(x)):
                raise NonFinite("Euler-Maruyama path diverged", k + 1)
        out[start:start + len(chunk)] = x
    return out


def euler_maruyama_sample(v, diffusion, points, grid: TimeGrid, seed: int, factor: str = "cholesky") -> SamplePath:
    end = euler_maruyama_batch(v, diffusion, points, grid, [seed], factor)[0]
    return SamplePath(end, int(seed))


def empirical_moments(samples) -> GaussianState:
    """Sample mean and unbiased covariance of flattened endpoints."""
    ends = np.stack([s.endpoint if isinstance(s, SamplePath) else np.asarray(s) for s in samples])
    if ends.shape[0] < 2:
        raise TooFewSamples(f"need at least 2 samples, got {ends.shape[0]}")
    flat = ends.reshape(ends.shape[0], -1)
    mean = flat.mean(axis=0)
    centred = flat - mean
    cov = centred.T @ centred / (flat.shape[0] - 1)
    return GaussianState(mean, cov, 1.0)


def compare_ll_vs_mc(v, diffusion, points, grid: TimeGrid, n_samples: int, seed: int,
                     factor: str = "cholesky") -> MomentComparison:
    if n_samples < 100:
        raise TooFewSamples(f"LL/MC comparison needs at least 100 samples, got {n_samples}")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ll = propagate_moments(v, diffusion, identity_state(points), grid, keep_history=False).final
    seeds = [derive_seed(seed, i) for i in range(n_samples)]
    mc = empirical_moments(euler_maruyama_batch(v, diffusion, points, grid, seeds, factor))
    dim = points.shape[1]
    gap = (ll.mean - mc.mean).reshape(-1, dim)
    return MomentComparison(
        mean_distance=float(np.mean(np.linalg.norm(gap, axis=1))),
        cov_frobenius_diff=float(np.linalg.norm(ll.cov - mc.cov)),
        baseline_variance=float(np.trace(mc.cov)),
        n_samples=int(n_samples),
        n_steps=grid.steps,
    )


def random_velocity(control_points, sigma: float, max_speed: float, rng) -> VelocityField:
    """Random prior draw ``mu = S alpha`` rescaled so the fastest control point moves at ``max_speed``."""
    control_points = np.atleast_2d(np.asarray(control_points, dtype=float))
    kmat = assemble_kernel_matrix(control_points, sigma)
    alpha = rng.standard_normal(control_points.shape)
    mu = kmat.scalar @ alpha
    mu *= max_speed / np.max(np.linalg.norm(mu, axis=1))
    return VelocityField.from_mu(control_points, mu, sigma, kmat)


@dataclass
class ValidationRow:
    shape: str
    sigma: float
    comparisons: list = field(default_factory=list)

    def _stat(self, name):
        vals = np.array([getattr(c, name) for c in self.comparisons])
        return float(vals.mean()), float(vals.std(ddof=1) if vals.size > 1 else 0.0)

    @property
    def mean_distance(self):
        return self._stat("mean_distance")

    @property
    def cov_frobenius_diff(self):
        return self._stat("cov_frobenius_diff")

    @property
    def baseline_variance(self):
        return self._stat("baseline_variance")

    def as_dict(self):
        md, md_sd = self.mean_distance
        cd, cd_sd = self.cov_frobenius_diff
        bv, bv_sd = self.baseline_variance
        return {"shape": self.shape, "sigma": self.sigma, "repeats": len(self.comparisons),
                "mean_distance": md, "mean_distance_sd": md_sd,
                "cov_frobenius_diff": cd, "cov_frobenius_diff_sd": cd_sd,
                "baseline_variance": bv, "baseline_variance_sd": bv_sd}


def run_validation(sigmas=(0.1, 2.0, 5.0), shapes=("circle", "flower"), repeats: int = 100,
                   n_samples: int = 2000, steps: int = 64, seed: int = 0, n_points: int = 20,
                   radius: float = 10.0, noise_amplitude: float = 1.0,
                   petal_amplitude: float = 0.3, petal_count: int = 5, factor: str = "cholesky"):
    """Compare LL moments with Monte-Carlo moments over random velocity fields.

    For every (shape, sigma, repeat) a velocity is drawn from the prior with
    its fastest control point moving at ``radius / 2`` per unit time.
    """
    from .flow import KernelDiffusion
    from .kernel import SquaredExponentialKernel

    grid = TimeGrid(steps)
    rows = []
    counter = 0
    for shape in shapes:
        pts = shape_points(shape, n_points, radius, petal_amplitude, petal_count)
        for sigma in sigmas:
            row = ValidationRow(shape, float(sigma))
            noise = KernelDiffusion(SquaredExponentialKernel(sigma, pts.shape[1]), noise_amplitude)
            for _ in range(repeats):
                rng = np.random.default_rng(derive_seed(seed, 2 * counter))
                v = random_velocity(pts, sigma, radius / 2.0, rng)
                row.comparisons.append(
                    compare_ll_vs_mc(v, noise, pts, grid, n_samples, derive_seed(seed, 2 * counter + 1), factor))
                counter += 1
            rows.append(row)
    return rows
