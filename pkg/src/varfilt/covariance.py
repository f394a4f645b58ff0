"""Structured SPD covariance matrices.

Three representations share one small protocol (``dim``, ``diagonal()``,
``matvec()``, ``to_dense()``):

- ``DiagCov``: diag(d)
- ``DiagPlusLowRank``: diag(d) + Σₖ cₖ uₖuₖᵀ with at most ``K_MAX`` terms
- ``DenseCov``: a full symmetric matrix (Kalman baseline and test oracle)

Everything on the first two is O(n·K_MAX) time and O(n) memory: solves go
through Sherman–Morrison, log-determinants through the determinant lemma and
extreme eigenvalues through the secular equation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.linalg

from varfilt.errors import ArgumentError, CapacityError, SingularityError

K_MAX = 2

EIG_RTOL = 1e-12


def as_vector(values, name: str = "vector", length: int | None = None) -> np.ndarray:
    """Coerce to a finite 1-D float array, optionally of a fixed length."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ArgumentError(f"{name} must be 1-D, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ArgumentError(f"{name} has length {arr.shape[0]}, expected {length}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} contains non-finite values")
    return arr


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def _positive_diagonal(values, name: str = "d") -> np.ndarray:
    d = as_vector(values, name)
    if d.size == 0:
        raise ArgumentError(f"{name} must not be empty")
    if np.any(d <= 0.0):
        raise ArgumentError(f"{name} must be strictly positive")
    return _readonly(d)


@dataclass(frozen=True, eq=False)
class DiagCov:
    """diag(d) with d > 0."""

    d: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "d", _positive_diagonal(self.d))

    @property
    def dim(self) -> int:
        return self.d.shape[0]

    def diagonal(self) -> np.ndarray:
        return self.d

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.d * v

    def to_dense(self) -> np.ndarray:
        return np.diag(self.d)


@dataclass(frozen=True, eq=False)
class DiagPlusLowRank:
    """diag(d) + Σₖ cₖ uₖuₖᵀ.

    Weights are signed: Kalman downdates are stored as negative ``c``. The
    represented matrix is assumed SPD; ``min_eig`` checks it on demand.
    """

    d: np.ndarray
    terms: tuple[tuple[float, np.ndarray], ...] = ()

    def __post_init__(self) -> None:
        d = _positive_diagonal(self.d)
        object.__setattr__(self, "d", d)
        if len(self.terms) > K_MAX:
            raise CapacityError(f"{len(self.terms)} low-rank terms exceed K_MAX={K_MAX}")
        terms = []
        for c, u in self.terms:
            c = float(c)
            if not math.isfinite(c):
                raise ArgumentError(f"low-rank weight must be finite, got {c}")
            terms.append((c, _readonly(as_vector(u, "u", d.shape[0]))))
        object.__setattr__(self, "terms", tuple(terms))

    @classmethod
    def from_diag(cls, cov: DiagCov) -> DiagPlusLowRank:
        return cls(cov.d)

    @property
    def dim(self) -> int:
        return self.d.shape[0]

    @property
    def rank(self) -> int:
        return len(self.terms)

    def diagonal(self) -> np.ndarray:
        diag = self.d.copy()
        for c, u in self.terms:
            diag += c * u * u
        return diag

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = self.d * v
        for c, u in self.terms:
            out = out + (c * (u @ v)) * u
        return out

    def to_dense(self) -> np.ndarray:
        dense = np.diag(self.d)
        for c, u in self.terms:
            dense += c * np.outer(u, u)
        return dense

    def factors(self) -> tuple[np.ndarray, np.ndarray]:
        """(U, c): the low-rank part as an n×K matrix and its K weights."""
        if not self.terms:
            return np.zeros((self.dim, 0)), np.zeros(0)
        return (
            np.column_stack([u for _, u in self.terms]),
            np.array([c for c, _ in self.terms]),
        )

    def with_term(self, c: float, u: np.ndarray) -> DiagPlusLowRank:
        if self.rank >= K_MAX:
            raise CapacityError(
                f"adding a term to a rank-{self.rank} matrix exceeds K_MAX={K_MAX}; project first"
            )
        return DiagPlusLowRank(self.d, (*self.terms, (c, u)))


@dataclass(frozen=True, eq=False)
class DenseCov:
    """A full symmetric matrix. Quadratic memory; baseline and oracle only."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=float, copy=True)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
            raise ArgumentError(f"covariance must be a non-empty square matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ArgumentError("covariance contains non-finite values")
        scale = max(float(np.max(np.abs(m))), np.finfo(float).tiny)
        if np.max(np.abs(m - m.T)) > 1e-12 * scale:
            raise ArgumentError("covariance is not symmetric")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def diagonal(self) -> np.ndarray:
        return np.diagonal(self.matrix).copy()

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def to_dense(self) -> np.ndarray:
        return np.array(self.matrix)


Covariance = Union[DiagCov, DiagPlusLowRank, DenseCov]


def _cholesky(matrix: np.ndarray):
    try:
        return scipy.linalg.cho_factor(matrix, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"matrix is not positive definite: {exc}") from exc


def _sherman_morrison(P: DiagPlusLowRank, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    """Apply P⁻¹ to the columns of ``rhs``; also return Σ log(1 + cₖuₖᵀA⁻¹uₖ).

    A is the partial sum diag(d) + Σ_{j<k} terms; each partial sum must stay SPD.
    """
    m = rhs.shape[1]
    cols = np.column_stack([rhs] + [u for _, u in P.terms]) / P.d[:, None]
    log_corr = 0.0
    for k, (c, u) in enumerate(P.terms):
        w = cols[:, m + k].copy()
        denom = 1.0 + c * (u @ w)
        if not denom > 0.0:
            raise SingularityError(
                f"rank-one update {k} makes the matrix non-SPD (denominator {denom:.3g})"
            )
        cols -= np.outer(w, (c / denom) * (u @ cols))
        log_corr += math.log(denom)
    return cols[:, :m], log_corr


def quad_form(P: Covariance, v) -> float:
    """vᵀPv."""
    v = as_vector(v, "v", P.dim)
    if isinstance(P, DiagCov):
        return float(np.sum(P.d * v * v))
    if isinstance(P, DiagPlusLowRank):
        value = float(np.sum(P.d * v * v))
        for c, u in P.terms:
            value += c * float(u @ v) ** 2
        return value
    return float(v @ P.matrix @ v)


def solve(P: Covariance, b) -> np.ndarray:
    """P⁻¹b. Raises ``SingularityError`` when P is detected not to be SPD."""
    b = as_vector(b, "b", P.dim)
    if isinstance(P, DiagCov):
        return b / P.d
    if isinstance(P, DiagPlusLowRank):
        return _sherman_morrison(P, b[:, None])[0][:, 0]
    return scipy.linalg.cho_solve(_cholesky(P.matrix), b)


def logdet(P: Covariance) -> float:
    """log|P| via the matrix determinant lemma (structured) or Cholesky (dense)."""
    if isinstance(P, DiagCov):
        return float(np.sum(np.log(P.d)))
    if isinstance(P, DiagPlusLowRank):
        _, log_corr = _sherman_morrison(P, np.zeros((P.dim, 0)))
        return float(np.sum(np.log(P.d))) + log_corr
    factor, _ = _cholesky(P.matrix)
    return 2.0 * float(np.sum(np.log(np.diagonal(factor))))


def inverse_diagonal(P: Covariance) -> np.ndarray:
    """diag(P⁻¹), O(n·K²) for structured P (Woodbury)."""
    if isinstance(P, DiagCov):
        return 1.0 / P.d
    if isinstance(P, DiagPlusLowRank):
        U, c = P.factors()
        keep = c != 0.0
        U, c = U[:, keep], c[keep]
        if c.size == 0:
            return 1.0 / P.d
        W = U / P.d[:, None]
        core = np.diag(1.0 / c) + U.T @ W
        try:
            inner = np.linalg.solve(core, W.T)
        except np.linalg.LinAlgError as exc:
            raise SingularityError(f"Woodbury core is singular: {exc}") from exc
        diag = 1.0 / P.d - np.sum(W * inner.T, axis=1)
    else:
        factor = _cholesky(P.matrix)
        diag = np.diagonal(scipy.linalg.cho_solve(factor, np.eye(P.dim))).copy()
    if np.any(diag <= 0.0):
        raise SingularityError("inverse has a non-positive diagonal entry; matrix is not SPD")
    return diag


def _gain_parts(P: Covariance, x, R: float) -> tuple[np.ndarray, np.ndarray, float]:
    x = as_vector(x, "x", P.dim)
    R = float(R)
    if not math.isfinite(R) or R <= 0.0:
        raise ArgumentError(f"measurement variance must be positive, got {R}")
    Px = P.matvec(x)
    s = float(x @ Px) + R
    return Px / s, Px, s


def kalman_gain(P: Covariance, x, R: float) -> np.ndarray:
    """K = Px / (xᵀPx + R) without forming the posterior."""
    return _gain_parts(P, x, R)[0]


def kf_update(prior: Covariance, x, R: float) -> tuple[np.ndarray, Covariance]:
    """Scalar-measurement Kalman update: (gain, prior − (Px)(Px)ᵀ/(xᵀPx + R)).

    A structured prior of rank k comes back with rank k+1; a dense prior stays
    dense. An uninformative input (Px = 0) returns the prior unchanged.
    """
    gain, Px, s = _gain_parts(prior, x, R)
    if not np.any(Px):
        return gain, prior
    if isinstance(prior, DiagCov):
        return gain, DiagPlusLowRank(prior.d, ((-1.0 / s, Px),))
    if isinstance(prior, DiagPlusLowRank):
        return gain, prior.with_term(-1.0 / s, Px)
    return gain, DenseCov(prior.matrix - np.outer(Px, Px) / s)


def _bisect_secular(secular, lo: float, hi: float, atol: float, increasing: bool) -> float:
    # the bracket endpoints may be poles; only interior points are evaluated.
    # Returns the lower end: up to rounding in the secular sign, a lower bound.
    while hi - lo > max(atol, EIG_RTOL * min(abs(lo), abs(hi))):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        below = secular(mid) < 0.0
        if below == increasing:
            lo = mid
        else:
            hi = mid
    return lo


def min_eig_diag_plus_rank1(d, c: float, u) -> float:
    """Smallest eigenvalue of diag(d) + c·uuᵀ.

    Bisection on 1 + c·Σ uᵢ²/(dᵢ − λ) = 0 over the components with uᵢ ≠ 0;
    components with uᵢ = 0 contribute dᵢ as exact eigenvalues. The result
    is a lower bound, within 1e-12 relative to the root (with an absolute
    floor far below machine epsilon times max(|d|, |c|·‖u‖²) for roots at zero).
    """
    d = as_vector(d, "d")
    if d.size == 0:
        raise ArgumentError("d must not be empty")
    u = as_vector(u, "u", d.shape[0])
    c = float(c)
    active = u != 0.0
    if c == 0.0 or not np.any(active):
        return float(d.min())

    passive_min = float(d[~active].min()) if not np.all(active) else math.inf
    da = d[active]
    ua2 = u[active] ** 2
    dmin = float(da.min())
    scale = max(float(np.max(np.abs(d))), abs(c) * float(ua2.sum()), np.finfo(float).tiny)
    atol = EIG_RTOL * np.finfo(float).eps * scale

    def secular(lam: float) -> float:
        return 1.0 + c * float(np.sum(ua2 / (da - lam)))

    if c < 0.0:
        # Weyl bound on the left (secular >= 0), pole at dmin on the right
        root = _bisect_secular(secular, dmin + c * float(ua2.sum()), dmin, atol, increasing=False)
    else:
        at_min = da == dmin
        if np.count_nonzero(at_min) > 1:
            # a repeated pole deflates: dmin itself is an eigenvalue
            return min(dmin, passive_min)
        hi = dmin + c * float(ua2[at_min][0])
        if np.any(~at_min):
            hi = min(hi, float(da[~at_min].min()))
        root = _bisect_secular(secular, dmin, hi, atol, increasing=True)
    return min(root, passive_min)


def _count_below(d: np.ndarray, U: np.ndarray, c: np.ndarray, lam: float) -> int:
    """Number of eigenvalues of diag(d) + U diag(c) Uᵀ below ``lam`` (Haynsworth inertia)."""
    shift = d - lam
    zero = shift == 0.0
    if np.any(zero):
        shift = np.where(zero, -np.finfo(float).eps * max(1.0, abs(lam)), shift)
    schur = -np.diag(1.0 / c) - (U / shift[:, None]).T @ U
    negatives = int(np.count_nonzero(np.linalg.eigvalsh(schur) < 0.0))
    return int(np.count_nonzero(shift < 0.0)) + negatives - int(np.count_nonzero(c > 0.0))


def min_eig(P: Covariance) -> float:
    """Smallest eigenvalue of any covariance variant."""
    if isinstance(P, DiagCov):
        return float(P.d.min())
    if isinstance(P, DenseCov):
        return float(scipy.linalg.eigvalsh(P.matrix, subset_by_index=[0, 0])[0])
    U, c = P.factors()
    keep = (c != 0.0) & np.any(U != 0.0, axis=0)
    U, c = U[:, keep], c[keep]
    if c.size == 0:
        return float(P.d.min())
    if c.size == 1:
        return min_eig_diag_plus_rank1(P.d, c[0], U[:, 0])

    norms = np.sum(U * U, axis=0)
    dmin = float(P.d.min())
    tol = EIG_RTOL * max(float(P.d.max()), float(np.sum(np.abs(c) * norms)))
    lo = dmin + float(np.sum(np.minimum(c, 0.0) * norms)) - tol
    hi = dmin + float(np.sum(np.maximum(c, 0.0) * norms)) + tol
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _count_below(P.d, U, c, mid) >= 1:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def sandwich_violation(prev: DiagCov, x, R: float, cand: DiagCov) -> float:
    """λ_min(cand − P^KF) for P^KF = kf_update(prev, x, R).

    A negative value certifies that ``cand`` breaks P^KF ⪯ cand: a diagonal
    posterior squeezed below ``prev`` in any coordinate cannot stay above the
    exact posterior.
    """
    if cand.dim != prev.dim:
        raise ArgumentError(f"candidate has dimension {cand.dim}, previous has {prev.dim}")
    if np.any(cand.d > prev.d):
        raise ArgumentError("candidate must not exceed the previous covariance component-wise")
    _, Px, s = _gain_parts(prev, x, R)
    return min_eig_diag_plus_rank1(cand.d - prev.d, 1.0 / s, Px)
