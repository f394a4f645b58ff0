"""Experiment driver: seeded problem sweeps, error metrics and posterior ellipses."""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.stats

from varfilt.covariance import Covariance, DenseCov
from varfilt.divergence import elbo_project, ep_project, l2_project
from varfilt.errors import ArgumentError, RunError, SingularityError, VarfiltError
from varfilt.filters import FilterKind, HinfConfig, L2Config, assimilate, initial_state
from varfilt.model import GroundTruth, Observation, ProblemSpec, derive_seed, generate_problem, stream

logger = logging.getLogger(__name__)

QUANTILES = (0.035, 0.965)
ELLIPSE_METHODS = ("true", "ep", "elbo", "l2")


@dataclass(frozen=True, eq=False)
class RunMetrics:
    """Outcome of one filter on one problem. Series have one entry per step."""

    kind: FilterKind
    final_mse: float
    final_wcse: float
    per_step_mse: np.ndarray
    per_step_wcse: np.ndarray
    runtime_ms: float
    final_mean: np.ndarray
    final_var: np.ndarray
    gamma_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    hinf_cost: float | None = None
    l2_unconverged: int = 0


@dataclass(frozen=True)
class SweepRecord:
    """Aggregate over the problems of one (dimension, filter) cell."""

    dim: int
    filter: FilterKind
    mse_mean: float
    mse_lo: float
    mse_hi: float
    wcse_mean: float
    wcse_lo: float
    wcse_hi: float
    problems: int
    steps: int
    seed: int


def _pair(estimate, truth) -> tuple[np.ndarray, np.ndarray]:
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape or estimate.ndim != 1:
        raise ArgumentError(f"shape mismatch: estimate {estimate.shape}, truth {truth.shape}")
    return estimate, truth


def mse(estimate, truth) -> float:
    """(1/n)·‖estimate − truth‖²."""
    estimate, truth = _pair(estimate, truth)
    diff = estimate - truth
    return float(diff @ diff) / diff.shape[0]


def wcse(estimate, truth, var_diag) -> float:
    """Worst-case scaled error: maxᵢ |estimateᵢ − truthᵢ| / √varᵢ."""
    estimate, truth = _pair(estimate, truth)
    var_diag = np.asarray(var_diag, dtype=float)
    if var_diag.shape != truth.shape:
        raise ArgumentError(f"variances have shape {var_diag.shape}, expected {truth.shape}")
    if np.any(var_diag <= 0.0) or not np.all(np.isfinite(var_diag)):
        raise ArgumentError("variances must be positive and finite")
    return float(np.max(np.abs(estimate - truth) / np.sqrt(var_diag)))


def observations(spec: ProblemSpec, truth: GroundTruth, steps: int | None = None) -> list[Observation]:
    """The first ``steps`` observations of a problem (all of them by default)."""
    steps = spec.horizon if steps is None else steps
    if not 0 <= steps <= spec.horizon:
        raise ArgumentError(f"steps must lie in [0, {spec.horizon}], got {steps}")
    return [stream(spec, truth, t) for t in range(steps)]


def hinf_cost(estimates, truth: GroundTruth, spec: ProblemSpec) -> float:
    """Energy ratio of estimation error to disturbance with S = I and no process noise.

    Σ_t ‖θ − θ̂_t‖² / (‖θ − θ̂₀‖²_{P₀⁻¹} + Σ_t η_t²/R), where ``estimates[t]`` is
    the estimate after step t and θ̂₀, P₀ the prior.
    """
    estimates = np.asarray(estimates, dtype=float).reshape(-1, spec.n)
    steps = estimates.shape[0]
    if steps > spec.horizon:
        raise ArgumentError(f"{steps} estimates for a horizon of {spec.horizon}")
    theta = truth.theta
    numerator = float(np.sum((estimates - theta) ** 2))
    prior_err = theta - spec.prior_mean
    noise = truth.noise_draws[:steps]
    denominator = float(prior_err @ prior_err) / spec.prior_var + float(noise @ noise) / spec.meas_var
    if denominator <= 0.0:
        raise ArgumentError("disturbance energy is zero; the cost ratio is undefined")
    return numerator / denominator


def run_filter(
    spec: ProblemSpec,
    truth: GroundTruth,
    kind: FilterKind,
    hinf: HinfConfig | None = None,
    *,
    l2: L2Config | None = None,
    steps: int | None = None,
    obs: Sequence[Observation] | None = None,
    problem: int | None = None,
) -> RunMetrics:
    """Run one filter over a problem and record its error series.

    Pass ``obs`` to reuse a stream already drawn for another filter.
    Any failure is re-raised as ``RunError`` naming the step.
    """
    truth.check_against(spec)
    if obs is None:
        obs = observations(spec, truth, steps)
    elif steps is not None:
        obs = obs[:steps]
    R = spec.meas_var
    theta = truth.theta

    state = initial_state(kind, spec, hinf, l2)
    n_steps = len(obs)
    per_step_mse = np.empty(n_steps)
    per_step_wcse = np.empty(n_steps)
    estimates = np.empty((n_steps, spec.n)) if kind.is_hinf else None

    start = time.perf_counter()
    t = 0
    try:
        for t, item in enumerate(obs):
            state = assimilate(state, item, R)
            per_step_mse[t] = mse(state.mean, theta)
            per_step_wcse[t] = wcse(state.mean, theta, state.variances)
            if estimates is not None:
                estimates[t] = state.mean
        runtime_ms = 1000.0 * (time.perf_counter() - start)
        final_var = state.variances
        cost = hinf_cost(estimates, truth, spec) if estimates is not None and n_steps else None
        final_wcse = wcse(state.mean, theta, final_var)
    except (VarfiltError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise RunError(str(exc), dim=spec.n, filter_name=kind.value, problem=problem, step=t) from exc

    if state.l2_unconverged:
        logger.debug("%s n=%d: %d L2 projections did not converge", kind.value, spec.n, state.l2_unconverged)
    return RunMetrics(
        kind=kind,
        final_mse=mse(state.mean, theta),
        final_wcse=final_wcse,
        per_step_mse=per_step_mse,
        per_step_wcse=per_step_wcse,
        runtime_ms=runtime_ms,
        final_mean=state.mean,
        final_var=final_var,
        gamma_trace=np.asarray(state.gamma_trace, dtype=float),
        hinf_cost=cost,
        l2_unconverged=state.l2_unconverged,
    )


def _interval(values: np.ndarray) -> tuple[float, float, float]:
    mean = float(values.mean())
    lo, hi = (float(q) for q in np.quantile(values, QUANTILES))
    return mean, min(lo, mean), max(hi, mean)


def _unique(items: Sequence) -> list:
    return list(dict.fromkeys(items))


def sweep(
    dims: Sequence[int],
    problems: int,
    steps: int,
    kinds: Sequence[FilterKind],
    master_seed: int,
    hinf: HinfConfig | None = None,
    *,
    l2: L2Config | None = None,
    threads: int | None = None,
    input_var: float = 0.5,
    meas_var: float = 0.1,
    prior_var: float = 1.0,
) -> list[SweepRecord]:
    """Run every filter on ``problems`` seeded problems per dimension.

    Problem p at dimension n is seeded by ``derive_seed(master_seed, n, p)``
    and every filter consumes the same observations. Records come back
    sorted by dimension, then by ``FilterKind`` declaration order, whatever
    the order of ``kinds`` or the thread count.
    """
    dims = sorted(_unique(int(n) for n in dims))
    order = list(FilterKind)
    kinds = sorted(_unique(FilterKind(k) for k in kinds), key=order.index)
    if not dims or not kinds:
        raise ArgumentError("dims and kinds must not be empty")
    if problems < 1:
        raise ArgumentError(f"problems must be >= 1, got {problems}")
    if steps < 0:
        raise ArgumentError(f"steps must be >= 0, got {steps}")

    def run_cell(dim: int, p: int) -> dict[FilterKind, tuple[float, float]]:
        spec, truth = generate_problem(
            dim,
            derive_seed(master_seed, dim, p),
            horizon=max(steps, 1),
            input_var=input_var,
            meas_var=meas_var,
            prior_var=prior_var,
        )
        obs = observations(spec, truth, steps)
        out = {}
        for kind in kinds:
            metrics = run_filter(spec, truth, kind, hinf, l2=l2, obs=obs, problem=p)
            out[kind] = (metrics.final_mse, metrics.final_wcse)
        logger.info("dim=%d problem=%d done", dim, p)
        return out

    cells = [(dim, p) for dim in dims for p in range(problems)]
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        results = list(pool.map(lambda cell: run_cell(*cell), cells))

    by_cell = dict(zip(cells, results))
    records = []
    for dim in dims:
        for kind in kinds:
            values = np.array([by_cell[(dim, p)][kind] for p in range(problems)])
            mse_mean, mse_lo, mse_hi = _interval(values[:, 0])
            wcse_mean, wcse_lo, wcse_hi = _interval(values[:, 1])
            records.append(
                SweepRecord(
                    dim=dim,
                    filter=kind,
                    mse_mean=mse_mean,
                    mse_lo=mse_lo,
                    mse_hi=mse_hi,
                    wcse_mean=wcse_mean,
                    wcse_lo=wcse_lo,
                    wcse_hi=wcse_hi,
                    problems=problems,
                    steps=steps,
                    seed=master_seed,
                )
            )
    return records


def ellipse_points(mean, cov: Covariance | np.ndarray, level: float = 0.9, count: int = 256) -> np.ndarray:
    """``count`` points on the ``level`` confidence ellipse of a 2-D Gaussian.

    μ + √q·L·(cos φ, sin φ) with q the chi-square(2) quantile and L the
    Cholesky factor of ``cov``.
    """
    mean = np.asarray(mean, dtype=float)
    matrix = cov.to_dense() if not isinstance(cov, np.ndarray) else np.asarray(cov, dtype=float)
    if mean.shape != (2,) or matrix.shape != (2, 2):
        raise ArgumentError(f"expected a 2-D mean and 2×2 covariance, got {mean.shape} and {matrix.shape}")
    if not 0.0 < level < 1.0:
        raise ArgumentError(f"level must lie in (0, 1), got {level}")
    if count < 1:
        raise ArgumentError(f"count must be >= 1, got {count}")
    try:
        L = scipy.linalg.cholesky(matrix, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"covariance is not positive definite: {exc}") from exc
    q = scipy.stats.chi2.ppf(level, df=2)
    phi = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
    circle = np.vstack([np.cos(phi), np.sin(phi)])
    return mean + np.sqrt(q) * (L @ circle).T


@dataclass(frozen=True, eq=False)
class EllipseSet:
    seed: int
    obs: int
    level: float
    mean: np.ndarray
    covariances: dict[str, np.ndarray]
    points: dict[str, np.ndarray]


def posterior_ellipses(seed: int, obs: int = 3, level: float = 0.9, count: int = 256) -> EllipseSet:
    """Exact 2-D posterior after ``obs`` observations and its three diagonal projections."""
    if obs < 0:
        raise ArgumentError(f"obs must be >= 0, got {obs}")
    spec, truth = generate_problem(2, seed, horizon=max(obs, 1))
    state = initial_state(FilterKind.KALMAN_DENSE, spec)
    for item in observations(spec, truth, obs):
        state = assimilate(state, item, spec.meas_var)

    posterior = state.cov
    if not isinstance(posterior, DenseCov):
        posterior = DenseCov(posterior.to_dense())
    covariances = {
        "true": posterior.matrix,
        "ep": ep_project(posterior).to_dense(),
        "elbo": elbo_project(posterior).to_dense(),
        "l2": l2_project(posterior, ep_project(posterior)).cov.to_dense(),
    }
    points = {name: ellipse_points(state.mean, cov, level, count) for name, cov in covariances.items()}
    return EllipseSet(seed=seed, obs=obs, level=level, mean=state.mean, covariances=covariances, points=points)
