"""Divergences between Gaussians and the diagonal projections built on them.

All projections assume the approximating diagonal Gaussian shares the mean of
the target (the mean is always updated by the Kalman gain), so only the
covariance enters the objectives.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.stats

from varfilt.covariance import (
    Covariance,
    DenseCov,
    DiagCov,
    DiagPlusLowRank,
    as_vector,
    inverse_diagonal,
    logdet,
)
from varfilt.errors import ArgumentError, SingularityError

logger = logging.getLogger(__name__)

ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
MIN_STEP = 1e-20
MAX_ITER = 500
# stop once STALL_WINDOW accepted steps lowered the objective by less than STALL_RTOL relative
STALL_WINDOW = 10
STALL_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class GaussianDist:
    mean: np.ndarray
    cov: Covariance

    def __post_init__(self) -> None:
        mean = as_vector(self.mean, "mean", self.cov.dim)
        object.__setattr__(self, "mean", mean)

    @property
    def dim(self) -> int:
        return self.cov.dim


def kl_gaussian(p: GaussianDist, q: GaussianDist) -> float:
    """D_KL(p‖q) = ½(tr(Σ_q⁻¹Σ_p) − n + ‖μ_p − μ_q‖²_{Σ_q⁻¹} + log|Σ_q|/|Σ_p|)."""
    if p.dim != q.dim:
        raise ArgumentError(f"dimension mismatch: {p.dim} vs {q.dim}")
    n = p.dim
    diff = p.mean - q.mean
    if isinstance(q.cov, DiagCov):
        trace = float(np.sum(p.cov.diagonal() / q.cov.d))
        maha = float(np.sum(diff * diff / q.cov.d))
    else:
        try:
            factor = scipy.linalg.cho_factor(q.cov.to_dense(), lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularityError(f"q covariance is not positive definite: {exc}") from exc
        trace = float(np.trace(scipy.linalg.cho_solve(factor, p.cov.to_dense())))
        maha = float(diff @ scipy.linalg.cho_solve(factor, diff))
    value = 0.5 * (trace - n + maha + logdet(q.cov) - logdet(p.cov))
    return max(value, 0.0)


def ep_project(post_cov: Covariance) -> DiagCov:
    """Forward-KL (EP) optimal diagonal: diag(P)."""
    return DiagCov(post_cov.diagonal())


def elbo_project(post_cov: Covariance) -> DiagCov:
    """Reverse-KL (ELBO) optimal diagonal: dᵢ = 1/(P⁻¹)ᵢᵢ."""
    return DiagCov(1.0 / inverse_diagonal(post_cov))


@dataclass(frozen=True)
class L2Workspace:
    """tr M, tr M² and log|M| for M = diag(d)⁻¹Σ_p."""

    trace_M: float
    trace_M2: float
    logdet_M: float


class _L2Evaluator:
    """Evaluates the squared L² information pseudometric against a fixed Σ_p.

    For Σ_p = E + U·diag(c)·Uᵀ every quantity is O(n·K²):
    tr M = Σ Σᵢᵢ/dᵢ, tr M² = Σ hᵢ/dᵢ with h = diag(Σ_p D⁻¹ Σ_p), and
    log|M| = log|Σ_p| − Σ log dᵢ.
    """

    def __init__(self, Sigma_p: Covariance) -> None:
        self.n = Sigma_p.dim
        self.logdet_p = logdet(Sigma_p)
        if isinstance(Sigma_p, DenseCov):
            self._dense = Sigma_p.matrix
            self._diag = np.diagonal(Sigma_p.matrix).copy()
            return
        self._dense = None
        if isinstance(Sigma_p, DiagCov):
            Sigma_p = DiagPlusLowRank.from_diag(Sigma_p)
        U, c = Sigma_p.factors()
        self._e = Sigma_p.d
        self._U = U
        self._Uc = U * c
        self._low_diag = (U * U) @ c
        self._diag = self._e + self._low_diag

    def _h(self, d: np.ndarray) -> np.ndarray:
        if self._dense is not None:
            return (self._dense * self._dense) @ (1.0 / d)
        e = self._e
        G = self._U.T @ (self._U / d[:, None])
        return e * e / d + 2.0 * (e / d) * self._low_diag + np.sum((self._Uc @ G) * self._Uc, axis=1)

    def workspace(self, d: np.ndarray) -> tuple[L2Workspace, np.ndarray]:
        h = self._h(d)
        ws = L2Workspace(
            trace_M=float(np.sum(self._diag / d)),
            trace_M2=float(np.sum(h / d)),
            logdet_M=self.logdet_p - float(np.sum(np.log(d))),
        )
        return ws, h

    def _value(self, ws: L2Workspace) -> float:
        n = self.n
        gap = ws.trace_M - ws.logdet_M - n
        return 0.5 * n - ws.trace_M + 0.5 * ws.trace_M2 + 0.25 * gap * gap

    def value(self, d: np.ndarray) -> float:
        return self._value(self.workspace(d)[0])

    def value_and_grad(self, d: np.ndarray) -> tuple[float, np.ndarray]:
        ws, h = self.workspace(d)
        gap = ws.trace_M - ws.logdet_M - self.n
        d2 = d * d
        grad = (self._diag - h) / d2 + 0.5 * gap * (1.0 / d - self._diag / d2)
        return self._value(ws), grad


def _positive(d, n: int) -> np.ndarray:
    if isinstance(d, DiagCov):
        d = d.d
    d = as_vector(d, "d", n)
    if np.any(d <= 0.0):
        raise ArgumentError("diagonal variances must be strictly positive")
    return d


def l2_workspace(Sigma_p: Covariance, d) -> L2Workspace:
    return _L2Evaluator(Sigma_p).workspace(_positive(d, Sigma_p.dim))[0]


def l2_objective(Sigma_p: Covariance, d) -> float:
    """E_p[(log p/q)²] for q = N(μ, diag(d)), p = N(μ, Σ_p):

    n/2 − tr M + tr M²/2 + ¼(tr M − log|M| − n)².
    """
    value = _L2Evaluator(Sigma_p).value(_positive(d, Sigma_p.dim))
    return max(value, 0.0)


def l2_gradient(Sigma_p: Covariance, d) -> np.ndarray:
    """∂/∂dᵢ of ``l2_objective``."""
    return _L2Evaluator(Sigma_p).value_and_grad(_positive(d, Sigma_p.dim))[1]


@dataclass(frozen=True, eq=False)
class L2Projection:
    cov: DiagCov
    objective: float
    iterations: int
    converged: bool
    stalled: bool = False


def l2_project(
    Sigma_p: Covariance,
    d0: DiagCov | np.ndarray | None = None,
    tol: float | None = None,
    max_iter: int = MAX_ITER,
) -> L2Projection:
    """Diagonal minimizing the L² pseudometric to N(μ, Σ_p).

    Gradient descent on s = log d with Armijo backtracking; the trial step
    starts from the Barzilai–Borwein length of the previous move. Starts at
    ``d0`` (default: the EP diagonal) and stops when ‖∇_s‖∞ < tol
    (default 1e-8·n). It also stops, with ``stalled=True``, when the line
    search hits its step floor or the objective has stopped moving at machine
    precision; after ``max_iter`` iterations or a stall the last iterate is
    returned with ``converged=False``.
    """
    n = Sigma_p.dim
    evaluator = _L2Evaluator(Sigma_p)
    d = Sigma_p.diagonal() if d0 is None else _positive(d0, n)
    if np.any(d <= 0.0):
        raise SingularityError("Σ_p has a non-positive diagonal entry")
    tol = 1e-8 * n if tol is None else float(tol)

    s = np.log(d)
    f, grad_d = evaluator.value_and_grad(d)
    g = grad_d * d
    prev_s: np.ndarray | None = None
    prev_g: np.ndarray | None = None
    converged = False
    stalled = False
    iterations = 0
    recent = deque([f], maxlen=STALL_WINDOW + 1)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        while iterations < max_iter:
            if float(np.max(np.abs(g))) < tol:
                converged = True
                break
            step = 1.0
            if prev_s is not None:
                ds = s - prev_s
                dg = g - prev_g
                curvature = float(ds @ dg)
                if curvature > 0.0:
                    step = min(max(float(ds @ ds) / curvature, 1e-10), 1e10)
            gg = float(g @ g)
            while step >= MIN_STEP:
                s_new = s - step * g
                d_new = np.exp(s_new)
                f_new = evaluator.value(d_new)
                if f_new <= f - ARMIJO_C * step * gg:
                    break
                step *= ARMIJO_SHRINK
            else:
                stalled = True
                break
            iterations += 1
            prev_s, prev_g = s, g
            s, d = s_new, d_new
            f, grad_d = evaluator.value_and_grad(d_new)
            g = grad_d * d_new
            recent.append(f)
            if len(recent) == recent.maxlen and recent[0] - f <= STALL_RTOL * max(abs(f), np.finfo(float).tiny):
                stalled = float(np.max(np.abs(g))) >= tol
                converged = not stalled
                break
        else:
            converged = float(np.max(np.abs(g))) < tol

    if not converged:
        logger.debug(
            "L2 projection %s after %d iterations, |grad|=%.3g (tol %.3g)",
            "stalled" if stalled else "stopped",
            iterations,
            float(np.max(np.abs(g))),
            tol,
        )
    return L2Projection(
        cov=DiagCov(d),
        objective=max(f, 0.0),
        iterations=iterations,
        converged=converged,
        stalled=stalled,
    )


def lr_mc_oracle(
    p: GaussianDist,
    q: GaussianDist,
    r: float,
    samples: int,
    seed: int,
) -> tuple[float, float]:
    """Monte Carlo estimate of E_p|log p/q|ʳ and its standard error."""
    if p.dim != q.dim:
        raise ArgumentError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if r < 1.0:
        raise ArgumentError(f"exponent must be >= 1, got {r}")
    if samples < 2:
        raise ArgumentError(f"need at least 2 samples, got {samples}")
    rng = np.random.default_rng(seed)
    cov_p = p.cov.to_dense()
    dist_p = scipy.stats.multivariate_normal(p.mean, cov_p)
    dist_q = scipy.stats.multivariate_normal(q.mean, q.cov.to_dense())
    theta = rng.multivariate_normal(p.mean, cov_p, size=samples, method="cholesky")
    log_ratio = np.atleast_1d(dist_p.logpdf(theta) - dist_q.logpdf(theta))
    values = np.abs(log_ratio) ** r
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(samples))
