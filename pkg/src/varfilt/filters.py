"""The five sequential filters and the augmented H∞ update.

Every filter is a pure transition ``FilterState -> FilterState``; states are
immutable, so a state can be kept as a checkpoint and re-run.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.linalg

from varfilt.covariance import (
    Covariance,
    DenseCov,
    DiagCov,
    DiagPlusLowRank,
    as_vector,
    kalman_gain,
    kf_update,
    min_eig_diag_plus_rank1,
)
from varfilt.divergence import ep_project, l2_project
from varfilt.errors import ArgumentError, FeasibilityError
from varfilt.model import Observation, ProblemSpec

logger = logging.getLogger(__name__)

PHI_RATIO = 2.0 / (1.0 + math.sqrt(5.0))
GOLDEN_RTOL = 1e-8
GOLDEN_MAX_ITER = 200
# relative slack on the determinant-lemma sign test
SPD_MARGIN = 1e-8


class FilterKind(Enum):
    """Filter algorithm. Values are the short names used on the command line."""

    KALMAN_DENSE = "kf"
    VIEP = "viep"
    L2 = "l2"
    VIHINF = "vih"
    L2HINF = "l2h"

    @property
    def is_hinf(self) -> bool:
        return self in (FilterKind.VIHINF, FilterKind.L2HINF)

    @classmethod
    def parse(cls, name: str) -> FilterKind:
        try:
            return cls(name.strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ArgumentError(f"unknown filter {name!r} (choose from {choices})") from None


class CorrX(Enum):
    """Which input enters the H∞ correction of the carried posterior.

    NONE inflates the carried diagonal only, d/(1 − γd). LITERAL re-weights
    the previously assimilated input; NEXT uses the incoming one.
    """

    NONE = "none"
    LITERAL = "literal"
    NEXT = "next"


class Projector(Enum):
    EP = "ep"
    L2 = "l2"


@dataclass(frozen=True)
class HinfConfig:
    """Options of the augmented H∞ update. The robustness weight S is fixed to I."""

    gamma_eps: float = 1e-3
    corr_x: CorrX = CorrX.NONE
    diagonalize_posterior: bool = True

    def __post_init__(self) -> None:
        eps = float(self.gamma_eps)
        # eps = 1 collapses the search interval and pins γ* = 0
        if not 0.0 < eps <= 1.0:
            raise ArgumentError(f"gamma_eps must lie in (0, 1], got {eps}")
        object.__setattr__(self, "gamma_eps", eps)
        if not isinstance(self.corr_x, CorrX):
            try:
                object.__setattr__(self, "corr_x", CorrX(str(self.corr_x).lower()))
            except ValueError:
                raise ArgumentError(f"unknown corr_x choice {self.corr_x!r}") from None


@dataclass(frozen=True)
class L2Config:
    tol: float | None = None
    max_iter: int = 500

    def __post_init__(self) -> None:
        if self.tol is not None and not self.tol > 0.0:
            raise ArgumentError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ArgumentError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True, eq=False)
class Pending:
    """Quantities of step t kept until x_{t+1} arrives to finalize γ*_t."""

    P_Lr: DiagCov
    P_KF: Covariance
    x_prev: np.ndarray


@dataclass(frozen=True, eq=False)
class FilterState:
    kind: FilterKind
    mean: np.ndarray
    cov: Covariance
    step: int = 0
    pending: Pending | None = None
    gamma_trace: tuple[float, ...] = ()
    hinf: HinfConfig = field(default_factory=HinfConfig)
    l2: L2Config = field(default_factory=L2Config)
    l2_unconverged: int = 0

    @property
    def dim(self) -> int:
        return self.cov.dim

    @property
    def variances(self) -> np.ndarray:
        return self.cov.diagonal()


def initial_state(
    kind: FilterKind,
    spec: ProblemSpec,
    hinf: HinfConfig | None = None,
    l2: L2Config | None = None,
) -> FilterState:
    """Prior N(prior_mean, prior_var·I); dense for the Kalman baseline, diagonal otherwise."""
    if kind is FilterKind.KALMAN_DENSE:
        cov: Covariance = DenseCov(spec.prior_var * np.eye(spec.n))
    else:
        cov = DiagCov(np.full(spec.n, spec.prior_var))
    return FilterState(
        kind=kind,
        mean=np.array(spec.prior_mean, dtype=float),
        cov=cov,
        hinf=hinf or HinfConfig(),
        l2=l2 or L2Config(),
    )


def _updated_mean(mean: np.ndarray, gain: np.ndarray, obs: Observation) -> np.ndarray:
    return mean + gain * (obs.y - float(obs.x @ mean))


def _require_diagonal(state: FilterState) -> DiagCov:
    if not isinstance(state.cov, DiagCov):
        raise ArgumentError(f"{state.kind.value} expects a diagonal covariance, got {type(state.cov).__name__}")
    return state.cov


def kalman_dense_step(state: FilterState, obs: Observation, R: float) -> FilterState:
    prior = state.cov
    if not isinstance(prior, DenseCov):
        prior = DenseCov(prior.to_dense())
    gain, post = kf_update(prior, obs.x, R)
    return replace(state, mean=_updated_mean(state.mean, gain, obs), cov=post, step=state.step + 1)


def vi_ep_step(state: FilterState, obs: Observation, R: float) -> FilterState:
    gain, post = kf_update(_require_diagonal(state), obs.x, R)
    return replace(
        state,
        mean=_updated_mean(state.mean, gain, obs),
        cov=ep_project(post),
        step=state.step + 1,
    )


def _l2_projection(post: Covariance, cfg: L2Config) -> tuple[DiagCov, bool]:
    result = l2_project(post, ep_project(post), tol=cfg.tol, max_iter=cfg.max_iter)
    return result.cov, result.converged


def l2_step(state: FilterState, obs: Observation, R: float) -> FilterState:
    gain, post = kf_update(_require_diagonal(state), obs.x, R)
    cov, converged = _l2_projection(post, state.l2)
    return replace(
        state,
        mean=_updated_mean(state.mean, gain, obs),
        cov=cov,
        step=state.step + 1,
        l2_unconverged=state.l2_unconverged + (not converged),
    )


def gamma_max(prior_d: DiagCov, x, R: float) -> float:
    """λ_min(diag(1/d) + xxᵀ/R): every γ below it keeps the H∞ precision SPD."""
    x = as_vector(x, "x", prior_d.dim)
    return min_eig_diag_plus_rank1(1.0 / prior_d.d, 1.0 / float(R), x)


def _inflated(d: np.ndarray, gamma: float) -> np.ndarray:
    # (1/d − γ)⁻¹, exact at γ = 0
    return d / (1.0 - gamma * d)


def _hinf_gain_vector(d: np.ndarray, x: np.ndarray, R: float, gamma: float) -> np.ndarray:
    dx = _inflated(d, gamma) * x
    return dx / (R + float(x @ dx))


def _hinf_post_diagonal(d: np.ndarray, x: np.ndarray, R: float, gamma: float) -> np.ndarray:
    dp = _inflated(d, gamma)
    dx = dp * x
    return dp - dx * dx / (R + float(x @ dx))


def _precision_is_spd(d: np.ndarray, x: np.ndarray, R: float, gamma: float) -> bool:
    """Sign test for diag(1/d − γ) + xxᵀ/R ≻ 0 in O(n).

    A positive rank-1 update lifts at most one eigenvalue across zero, so the
    core may hold one negative entry; the determinant lemma then decides.
    """
    core = 1.0 / d - gamma
    negative = core < 0.0
    if not np.any(negative):
        return bool(np.all(core > 0.0))
    if np.count_nonzero(negative) > 1 or np.any(core == 0.0):
        return False
    terms = x * x / (R * core)
    positive = float(terms[~negative].sum())
    return 1.0 + positive + float(terms[negative].sum()) < -SPD_MARGIN * (1.0 + positive)


def _correction_is_safe(d: np.ndarray, x_c: np.ndarray, R: float, gamma: float, cfg: HinfConfig) -> bool:
    if not _precision_is_spd(d, x_c, R, gamma):
        return False
    if not cfg.diagonalize_posterior:
        return True
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        diag = _hinf_post_diagonal(d, x_c, R, gamma)
    return bool(np.all(np.isfinite(diag)) and np.all(diag > 0.0))


def _dense_hinf_post(d: np.ndarray, x: np.ndarray, R: float, gamma: float) -> np.ndarray:
    precision = np.diag(1.0 / d - gamma) + np.outer(x, x) / R
    try:
        factor = scipy.linalg.cho_factor(precision, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FeasibilityError(f"H∞ precision is not positive definite at γ={gamma}") from exc
    post = scipy.linalg.cho_solve(factor, np.eye(d.shape[0]))
    return 0.5 * (post + post.T)


def hinf_gain(prior_d: DiagCov, x, R: float, gamma: float) -> tuple[np.ndarray, Covariance]:
    """H∞ gain and posterior for a diagonal prior.

    post = (P̃⁻¹ − γI + xxᵀ/R)⁻¹ and K = post·x/R. While γ < min(1/d) the core
    D' = (P̃⁻¹ − γI)⁻¹ is diagonal and positive, and the posterior is returned
    as D' plus one rank-1 term. Between min(1/d) and ``gamma_max`` the core is
    indefinite and the posterior comes back dense.
    """
    x = as_vector(x, "x", prior_d.dim)
    R = float(R)
    gamma = float(gamma)
    if not math.isfinite(gamma):
        raise ArgumentError(f"gamma must be finite, got {gamma}")
    bound = gamma_max(prior_d, x, R)
    if gamma >= bound:
        raise FeasibilityError(f"γ={gamma:.6g} is not below the feasibility bound {bound:.6g}")

    d = prior_d.d
    if np.all(gamma * d < 1.0):
        gain, post = kf_update(DiagCov(_inflated(d, gamma)), x, R)
        if isinstance(post, DiagCov):
            post = DiagPlusLowRank.from_diag(post)
        return gain, post

    post = _dense_hinf_post(d, x, R, gamma)
    return post @ x / R, DenseCov(post)


def _golden_section(f: Callable[[float], float], lo: float, hi: float, rtol: float = GOLDEN_RTOL) -> float:
    """Minimize ``f`` over [lo, hi]; an endpoint wins when it is no worse than the interior."""
    if not hi > lo:
        return lo
    f_lo, f_hi = f(lo), f(hi)
    a, b = lo, hi
    x1 = b - PHI_RATIO * (b - a)
    x2 = a + PHI_RATIO * (b - a)
    f1, f2 = f(x1), f(x2)
    width = rtol * (hi - lo)
    for _ in range(GOLDEN_MAX_ITER):
        if b - a <= width:
            break
        if f2 > f1:
            b, x2, f2 = x2, x1, f1
            x1 = b - PHI_RATIO * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + PHI_RATIO * (b - a)
            f2 = f(x2)

    x_mid = 0.5 * (a + b)
    f_mid = f(x_mid)
    if f_lo <= f_mid and f_lo <= f_hi:
        return lo
    if f_hi < f_mid:
        return hi
    return x_mid


def optimize_gamma(
    P_Lr: DiagCov,
    P_KF: Covariance,
    x_next,
    R: float,
    cfg: HinfConfig,
    x_corr=None,
) -> float:
    """γ* minimizing ‖K_H∞(P_Lr, γ) − K_KF(P_KF)‖₂ at the next input.

    The interval is [0, (1 − gamma_eps)·γ_max], where γ_max also covers the
    correction input ``x_corr`` when one is given. The result is halved until
    the correction at ``x_corr`` passes an explicit positivity check.
    """
    x_next = as_vector(x_next, "x_next", P_Lr.dim)
    R = float(R)
    k_ref = kalman_gain(P_KF, x_next, R)
    upper = gamma_max(P_Lr, x_next, R)
    if x_corr is not None:
        upper = min(upper, gamma_max(P_Lr, x_corr, R))
    upper *= 1.0 - cfg.gamma_eps
    d = P_Lr.d

    def mismatch(gamma: float) -> float:
        return float(np.linalg.norm(_hinf_gain_vector(d, x_next, R, gamma) - k_ref))

    gamma = _golden_section(mismatch, 0.0, max(upper, 0.0))
    if x_corr is None:
        return gamma
    x_corr = as_vector(x_corr, "x_corr", P_Lr.dim)
    for _ in range(GOLDEN_MAX_ITER):
        if gamma == 0.0 or _correction_is_safe(d, x_corr, R, gamma, cfg):
            return gamma
        logger.debug("γ=%.6g fails the positivity check, halving", gamma)
        gamma *= 0.5
    return 0.0


def _hinf_correction(P_Lr: DiagCov, x_c: np.ndarray | None, R: float, gamma: float, cfg: HinfConfig) -> Covariance:
    d = P_Lr.d
    if x_c is None:
        return DiagCov(_inflated(d, gamma))
    if cfg.diagonalize_posterior:
        with np.errstate(divide="ignore", invalid="ignore"):
            diag = _hinf_post_diagonal(d, x_c, R, gamma)
        if np.all(np.isfinite(diag)) and np.all(diag > 0.0):
            return DiagCov(diag)
        return DiagCov(np.diagonal(_dense_hinf_post(d, x_c, R, gamma)).copy())
    return hinf_gain(P_Lr, x_c, R, gamma)[1]


def augmented_step(
    state: FilterState,
    obs: Observation,
    R: float,
    cfg: HinfConfig | None = None,
    projector: Projector = Projector.EP,
) -> FilterState:
    """One augmented H∞ update with a deferred γ.

    γ*_{t−1} needs x_t, so the correction of the previous posterior is
    finalized here, before x_t is assimilated. At t = 0 there is nothing to
    correct and the step is a plain projected Kalman step.
    """
    cfg = cfg or state.hinf
    x = obs.x
    gamma_trace = state.gamma_trace
    if state.pending is None:
        prior = state.cov
    else:
        pending = state.pending
        if cfg.corr_x is CorrX.NONE:
            x_c = None
        elif cfg.corr_x is CorrX.LITERAL:
            x_c = pending.x_prev
        else:
            x_c = x
        x_corr = np.zeros_like(x) if x_c is None else x_c
        gamma = optimize_gamma(pending.P_Lr, pending.P_KF, x, R, cfg, x_corr=x_corr)
        prior = _hinf_correction(pending.P_Lr, x_c, R, gamma, cfg)
        gamma_trace = gamma_trace + (gamma,)
        logger.debug("step %d: γ*=%.6g", state.step, gamma)

    gain, P_KF = kf_update(prior, x, R)
    unconverged = state.l2_unconverged
    if projector is Projector.EP:
        P_Lr = ep_project(P_KF)
    else:
        P_Lr, converged = _l2_projection(P_KF, state.l2)
        unconverged += not converged

    return replace(
        state,
        mean=_updated_mean(state.mean, gain, obs),
        cov=P_Lr,
        step=state.step + 1,
        pending=Pending(P_Lr=P_Lr, P_KF=P_KF, x_prev=x),
        gamma_trace=gamma_trace,
        l2_unconverged=unconverged,
    )


def assimilate(state: FilterState, obs: Observation, R: float) -> FilterState:
    """Assimilate one observation with the algorithm named by ``state.kind``."""
    if obs.x.shape[0] != state.dim:
        raise ArgumentError(f"observation has dimension {obs.x.shape[0]}, filter has {state.dim}")
    kind = state.kind
    if kind is FilterKind.KALMAN_DENSE:
        return kalman_dense_step(state, obs, R)
    if kind is FilterKind.VIEP:
        return vi_ep_step(state, obs, R)
    if kind is FilterKind.L2:
        return l2_step(state, obs, R)
    projector = Projector.EP if kind is FilterKind.VIHINF else Projector.L2
    return augmented_step(state, obs, R, state.hinf, projector)
