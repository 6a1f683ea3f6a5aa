"""Variational landmark registration, small-deformation baseline and LOO.

The posterior over deformations is a Gaussian approximation of the
stochastic flow driven by a stationary spline velocity whose control
points sit at the moving landmarks. Only the control-point velocities
``mu0`` are optimized.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (JITTER_MAX, JITTER_START, GaussianState, cholesky_solve, jittered_cholesky,
                   symmetrize)
from .errors import DimensionMismatch, NotConverged, PdregError
from .flow import KernelDiffusion, TimeGrid, flow_mean, identity_state, propagate_moments
from .kernel import (KernelMatrix, SquaredExponentialKernel, VelocityField, _as_blocks,
                     assemble_kernel_matrix)
from .landmarks import LandmarkSet, match_landmarks

GRADIENT_MODES = ("finite_difference", "paper")
ARMIJO_C = 1e-4
MAX_HALVINGS = 60
MIN_TRIAL = 1e-8
MAX_TRIAL = 1e4


@dataclass
class RegistrationConfig:
    sigma: float = 2.0
    noise_amplitude: float = 1.0
    time_steps: int = 32
    max_iters: int = 300
    step_size: float = 1.0
    grad_tolerance: float = 1e-4
    gradient_mode: str = "finite_difference"
    data_weight: float = 1.0
    jitter_start: float = JITTER_START
    jitter_max: float = JITTER_MAX
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma", "step_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("noise_amplitude", "data_weight", "grad_tolerance"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if int(self.time_steps) < 1 or int(self.max_iters) < 0:
            raise ValueError("time_steps must be >= 1 and max_iters >= 0")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}, got {self.gradient_mode!r}")
        if not 0 < self.jitter_start <= self.jitter_max:
            raise ValueError("need 0 < jitter_start <= jitter_max")
        self.time_steps = int(self.time_steps)
        self.max_iters = int(self.max_iters)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.time_steps)

    def diffusion(self, dim: int) -> KernelDiffusion:
        return KernelDiffusion(SquaredExponentialKernel(self.sigma, dim), self.noise_amplitude)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RegistrationResult:
    mu0: np.ndarray
    final_state: GaussianState
    objective_trace: list
    residuals: np.ndarray
    converged: bool
    iterations: int
    control_points: np.ndarray
    labels: list
    kind: str = "diffeomorphic"
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.control_points.shape[1]

    @property
    def final_mean(self) -> np.ndarray:
        return self.final_state.points(self.dim)

    @property
    def mean_residual(self) -> float:
        return float(np.mean(self.residuals))


class Problem:
    """Cached pieces shared by objective and gradient evaluations."""

    def __init__(self, moving: LandmarkSet, fixed: LandmarkSet, config: RegistrationConfig):
        moving, fixed = match_landmarks(moving, fixed)
        self.moving, self.fixed, self.config = moving, fixed, config
        self.points = moving.points
        self.target = fixed.points
        self.n, self.dim = self.points.shape
        self.kmat = assemble_kernel_matrix(self.points, config.sigma, config.jitter_start, config.jitter_max)
        self.kernel = SquaredExponentialKernel(config.sigma, self.dim)
        self.diffusion = config.diffusion(self.dim)
        self.grid = config.grid
        self.weights = data_weights(fixed)

    def field(self, mu) -> VelocityField:
        mu = _as_blocks(np.asarray(mu, dtype=float), self.n, self.dim)
        return VelocityField(self.points, mu, self.kmat.solve(mu), self.kernel)

    def propagate(self, mu) -> GaussianState:
        v = self.field(mu)
        start = identity_state(self.points)
        lead = v.mu.shape[:-2]
        if lead:
            nd = self.n * self.dim
            start = GaussianState(np.broadcast_to(start.mean, lead + (nd,)),
                                  np.broadcast_to(start.cov, lead + (nd, nd)), 0.0)
        return propagate_moments(v, self.diffusion, start, self.grid, keep_history=False).final

    def objective(self, mu) -> np.ndarray:
        mu = _as_blocks(np.asarray(mu, dtype=float), self.n, self.dim)
        state = self.propagate(mu)
        kl = kl_term(mu, self.kmat)
        if self.config.data_weight == 0:
            return kl
        return kl + self.config.data_weight * _data_term(state.mean, state.cov, self.target, self.weights)


def data_weights(fixed: LandmarkSet) -> np.ndarray:
    """Per-landmark inverse localization variance (ones when absent)."""
    if fixed.noise_var is None:
        return np.ones(len(fixed))
    if np.any(fixed.noise_var <= 0):
        raise ValueError("the variational data term needs strictly positive noise_var")
    return 1.0 / fixed.noise_var


def kl_term(mu0, S: KernelMatrix):
    """Prior cost ``1/2 mu^T S^{-1} mu``; batches over leading axes of ``mu0``."""
    mu = _as_blocks(np.asarray(mu0, dtype=float), S.points.shape[0], S.dim)
    alpha = S.solve(mu)
    return 0.5 * np.sum(mu * alpha, axis=(-2, -1))


def _data_term(mean, cov, target, weights):
    n, d = target.shape
    w = np.repeat(weights, d)
    gap = mean.reshape(mean.shape[:-1] + (n, d)) - target
    sq = np.sum(weights * np.sum(gap * gap, axis=-1), axis=-1)
    tr = np.sum(w * np.diagonal(cov, axis1=-2, axis2=-1), axis=-1)
    return tr + sq


def expected_data_term(state: GaussianState, F: LandmarkSet) -> float:
    """``tr(W Lambda) + |mean - F|_W^2`` for the landmarks' state at t = 1."""
    target = F.points
    if state.mean.shape[-1] != target.size or state.cov.shape[-1] != target.size:
        raise DimensionMismatch(f"state of size {state.mean.shape[-1]} does not match {len(F)} landmarks")
    return float(_data_term(state.mean, state.cov, target, data_weights(F)))


def objective(mu0, M: LandmarkSet, F: LandmarkSet, config: RegistrationConfig) -> float:
    return float(Problem(M, F, config).objective(mu0))


def _fd_step(mu) -> float:
    return 1e-5 * (1.0 + float(np.max(np.abs(mu))))


def _fd_gradient(problem: Problem, mu, h=None):
    mu = np.asarray(mu, dtype=float).reshape(problem.n, problem.dim)
    h = _fd_step(mu) if h is None else float(h)
    m = mu.size
    shifts = np.eye(m).reshape(m, problem.n, problem.dim) * h
    vals = problem.objective(np.concatenate([mu + shifts, mu - shifts]))
    return (vals[:m] - vals[m:]) / (2.0 * h)


def _paper_gradient(problem: Problem, mu):
    mu = np.asarray(mu, dtype=float).reshape(problem.n, problem.dim)
    state = problem.propagate(mu)
    gap = state.points(problem.dim) - problem.target
    data = 2.0 * problem.config.data_weight * problem.weights[:, None] * gap
    return (0.5 * problem.kmat.solve(mu) + data).reshape(-1)


def _gradient(problem: Problem, mu, mode=None):
    mode = problem.config.gradient_mode if mode is None else mode
    if mode == "finite_difference":
        return _fd_gradient(problem, mu)
    if mode == "paper":
        return _paper_gradient(problem, mu)
    raise ValueError(f"unknown gradient mode {mode!r}")


def gradient(mu0, M: LandmarkSet, F: LandmarkSet, config: RegistrationConfig, h: float | None = None):
    """Gradient of the objective as a flat point-major vector.

    ``finite_difference`` uses central differences with step
    ``h = 1e-5 (1 + |mu0|_inf)`` unless ``h`` is given. ``paper`` is the
    closed-form approximation that ignores the flow Jacobian and the
    covariance term.
    """
    problem = Problem(M, F, config)
    if h is not None and config.gradient_mode == "finite_difference":
        return _fd_gradient(problem, mu0, h)
    return _gradient(problem, mu0)


def _result_from(problem: Problem, mu, trace, converged, iterations, kind="diffeomorphic", **meta):
    state = problem.propagate(mu)
    residuals = np.linalg.norm(state.points(problem.dim) - problem.target, axis=1)
    return RegistrationResult(mu.copy(), state, list(trace), residuals, bool(converged), int(iterations),
                              problem.points.copy(), list(problem.moving.labels), kind, dict(meta))


def register(M: LandmarkSet, F: LandmarkSet, config: RegistrationConfig | None = None,
             mu_init=None) -> RegistrationResult:
    """Gradient descent on ``mu0`` with Armijo backtracking.

    The first trial step of each line search is the Barzilai-Borwein
    estimate ``s.s / s.y`` from the previous iteration (twice the last
    accepted step when that is not positive); it is halved until the
    sufficient-decrease test passes. Stops when the largest gradient entry
    drops below ``grad_tolerance`` or after ``max_iters``.
    """
    config = RegistrationConfig() if config is None else config
    problem = Problem(M, F, config)
    mu = np.zeros((problem.n, problem.dim)) if mu_init is None else \
        _as_blocks(np.array(mu_init, dtype=float), problem.n, problem.dim).copy()
    f = float(problem.objective(mu))
    trace = [f]
    step = config.step_size
    converged = False
    stalled = False
    it = 0
    prev = None
    for it in range(config.max_iters + 1):
        g = _gradient(problem, mu)
        if np.max(np.abs(g)) < config.grad_tolerance:
            converged = True
            break
        if it == config.max_iters:
            break
        gg = float(g @ g)
        direction = g.reshape(mu.shape)
        t = 2.0 * step
        if prev is not None:
            s_k = (mu - prev[0]).reshape(-1)
            y_k = g - prev[1]
            sy = float(s_k @ y_k)
            if sy > 0:
                t = float(np.clip((s_k @ s_k) / sy, MIN_TRIAL, MAX_TRIAL))
        prev = (mu, g)
        for _ in range(MAX_HALVINGS):
            trial = mu - t * direction
            try:
                ft = float(problem.objective(trial))
            except PdregError:
                ft = np.inf
            if ft <= f - ARMIJO_C * t * gg:
                break
            t *= 0.5
        else:
            stalled = True
            break
        mu, f, step = trial, ft, t
        trace.append(f)
    if not converged:
        reason = "line search stalled" if stalled else f"reached max_iters={config.max_iters}"
        warnings.warn(f"registration did not converge ({reason})", NotConverged, stacklevel=2)
    return _result_from(problem, mu, trace, converged, it, stalled=stalled)


def mean_map(result: RegistrationResult, points, config: RegistrationConfig) -> np.ndarray:
    """Push ``points`` (Q x d) through the posterior mean deformation."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != result.dim:
        raise DimensionMismatch(f"points are {points.shape[1]}-D, registration is {result.dim}-D")
    if result.kind == "small_deformation":
        kern = SquaredExponentialKernel(config.sigma, result.dim)
        return points + kern.scalar_matrix(points, result.control_points) @ result.metadata["alpha"]
    v = VelocityField.from_mu(result.control_points, result.mu0, config.sigma,
                              assemble_kernel_matrix(result.control_points, config.sigma,
                                                     config.jitter_start, config.jitter_max))
    return flow_mean(v, points, config.grid)[-1]


def velocity_of(result: RegistrationResult, config: RegistrationConfig) -> VelocityField:
    kmat = assemble_kernel_matrix(result.control_points, config.sigma, config.jitter_start, config.jitter_max)
    return VelocityField.from_mu(result.control_points, result.mu0, config.sigma, kmat)


def _gp_system(points, config, noise_var):
    kern = SquaredExponentialKernel(config.sigma, points.shape[1])
    gram = kern.scalar_matrix(points)
    if noise_var is not None:
        gram = gram + np.diag(noise_var)
    chol, eps = jittered_cholesky(gram, config.jitter_start, config.jitter_max)
    return kern, chol, eps


def small_deformation_register(M: LandmarkSet, F: LandmarkSet,
                               config: RegistrationConfig | None = None) -> RegistrationResult:
    """GP regression of the displacement ``F - M`` with the same kernel.

    The posterior covariance is the usual GP conditional scaled by
    ``noise_amplitude**2``; the map ``x + u(x)`` may fold.
    """
    config = RegistrationConfig() if config is None else config
    M, F = match_landmarks(M, F)
    pts, d = M.points, M.dim
    kern, chol, eps = _gp_system(pts, config, F.noise_var)
    alpha = cholesky_solve(chol, F.points - pts)
    gram = kern.scalar_matrix(pts)
    disp = gram @ alpha
    post = symmetrize(gram - gram @ cholesky_solve(chol, gram))
    cov = config.noise_amplitude**2 * np.kron(post, np.eye(d))
    state = GaussianState((pts + disp).reshape(-1), cov, 1.0)
    residuals = np.linalg.norm(pts + disp - F.points, axis=1)
    return RegistrationResult(disp, state, [], residuals, True, 1, pts.copy(), list(M.labels),
                              "small_deformation", {"alpha": alpha, "chol": chol, "jitter": eps})


def baseline_marginals(result: RegistrationResult, queries, config: RegistrationConfig) -> np.ndarray:
    """GP conditional covariance ``eta^2 [k(x,x) - k_xM C^{-1} k_Mx] I`` per query."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    kern = SquaredExponentialKernel(config.sigma, result.dim)
    kq = kern.scalar_matrix(queries, result.control_points)
    reduction = np.sum(kq * cholesky_solve(result.metadata["chol"], kq.T).T, axis=1)
    var = np.clip(1.0 - reduction, 0.0, None) * config.noise_amplitude**2
    return var[:, None, None] * np.eye(result.dim)


@dataclass
class LooRow:
    label: str
    pre_mm: float
    post_mm: float
    predicted_fc: float
    failed: bool = False
    message: str = ""


@dataclass
class LooReport:
    rows: list
    sigma: float

    @property
    def ok_rows(self):
        return [r for r in self.rows if not r.failed]

    @property
    def mean_pre(self) -> float:
        return float(np.mean([r.pre_mm for r in self.ok_rows]))

    @property
    def mean_post(self) -> float:
        return float(np.mean([r.post_mm for r in self.ok_rows]))


def loo_validate(M: LandmarkSet, F: LandmarkSet, config: RegistrationConfig | None = None) -> LooReport:
    """Leave each landmark out, register on the rest and transfer it.

    A fold whose registration raises a domain error is reported as failed
    and the remaining folds still run.
    """
    from .uncertainty import marginal_covariance

    config = RegistrationConfig() if config is None else config
    M, F = match_landmarks(M, F)
    if len(M) < 2:
        raise DimensionMismatch("leave-one-out needs at least 2 landmarks")
    rows = []
    for i, label in enumerate(M.labels):
        keep = [j for j in range(len(M)) if j != i]
        pre = float(np.linalg.norm(M.points[i] - F.points[i]))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NotConverged)
                res = register(M.subset(keep), F.subset(keep), config)
            moved = mean_map(res, M.points[i:i + 1], config)[0]
            marg = marginal_covariance(res, M.points[i:i + 1], config)[0]
            rows.append(LooRow(label, pre, float(np.linalg.norm(moved - F.points[i])),
                               float(np.linalg.norm(marg))))
        except PdregError as exc:
            rows.append(LooRow(label, pre, float("nan"), float("nan"), True, str(exc)))
    return LooReport(rows, float(config.sigma))
