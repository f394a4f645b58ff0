"""Linear-Gaussian parameter-estimation problems and their observation streams.

A problem is y_t = x_tᵀθ + η_t with a static parameter θ (no dynamics, no
process noise). Every random draw is derived from the problem seed with
``numpy.random.SeedSequence`` spawn keys, so observation ``t`` can be
regenerated on its own without replaying steps ``0..t-1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from varfilt.errors import ArgumentError

MAX_SEED = 2**63 - 1

# spawn-key namespaces under one problem seed
_PROBLEM_KEY = 0
_NOISE_KEY = 1
_STEP_KEY = 2


def _frozen_array(values, name: str, length: int | None = None) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if arr.ndim != 1:
        raise ArgumentError(f"{name} must be a vector, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ArgumentError(f"{name} has length {arr.shape[0]}, expected {length}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def _check_count(value: int, name: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ArgumentError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ArgumentError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_seed(seed: int) -> int:
    """Validate a seed: an integer in [0, 2⁶³)."""
    seed = _check_count(seed, "seed", 0)
    if seed > MAX_SEED:
        raise ArgumentError(f"seed must be < 2**63, got {seed}")
    return seed


def derive_seed(master_seed: int, *keys: int) -> int:
    """Derive an independent child seed from a master seed and integer keys."""
    seq = np.random.SeedSequence(check_seed(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=keys))


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """One randomized estimation problem.

    Arrays are copied and made read-only, so a spec can be shared freely.
    """

    n: int
    horizon: int
    xbar: np.ndarray
    seed: int
    input_var: float = 0.5
    meas_var: float = 0.1
    prior_mean: np.ndarray | None = None
    prior_var: float = 1.0
    m: int = 1

    def __post_init__(self) -> None:
        n = _check_count(self.n, "n", 1)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "horizon", _check_count(self.horizon, "horizon", 1))
        object.__setattr__(self, "seed", check_seed(self.seed))
        if self.m != 1:
            raise ArgumentError(f"only scalar observations are supported (m=1), got m={self.m}")
        for name in ("input_var", "meas_var", "prior_var"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0.0:
                raise ArgumentError(f"{name} must be positive, got {value}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "xbar", _frozen_array(self.xbar, "xbar", n))
        prior_mean = np.zeros(n) if self.prior_mean is None else self.prior_mean
        object.__setattr__(self, "prior_mean", _frozen_array(prior_mean, "prior_mean", n))

    def same_as(self, other: ProblemSpec) -> bool:
        """Field-wise equality, comparing arrays exactly."""
        return (
            self.n == other.n
            and self.horizon == other.horizon
            and self.seed == other.seed
            and self.input_var == other.input_var
            and self.meas_var == other.meas_var
            and self.prior_var == other.prior_var
            and np.array_equal(self.xbar, other.xbar)
            and np.array_equal(self.prior_mean, other.prior_mean)
        )


@dataclass(frozen=True, eq=False)
class Observation:
    """A single input vector and its scalar measurement."""

    x: np.ndarray
    y: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", _frozen_array(self.x, "x"))
        y = float(self.y)
        if not np.isfinite(y):
            raise ArgumentError(f"y must be finite, got {y}")
        object.__setattr__(self, "y", y)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """The true parameter and the measurement noise of every step."""

    theta: np.ndarray
    noise_draws: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", _frozen_array(self.theta, "theta"))
        object.__setattr__(self, "noise_draws", _frozen_array(self.noise_draws, "noise_draws"))

    def check_against(self, spec: ProblemSpec) -> None:
        if self.theta.shape[0] != spec.n:
            raise ArgumentError(f"theta has length {self.theta.shape[0]}, spec has n={spec.n}")
        if self.noise_draws.shape[0] != spec.horizon:
            raise ArgumentError(
                f"noise_draws has length {self.noise_draws.shape[0]}, spec has horizon={spec.horizon}"
            )


def generate_problem(
    n: int,
    seed: int,
    *,
    horizon: int = 1000,
    input_var: float = 0.5,
    meas_var: float = 0.1,
    prior_var: float = 1.0,
) -> tuple[ProblemSpec, GroundTruth]:
    """Draw x̄ ~ N(0, I) and θ from the prior N(0, prior_var·I).

    Deterministic in (n, seed) and the keyword settings.
    """
    n = _check_count(n, "n", 1)
    seed = check_seed(seed)
    horizon = _check_count(horizon, "horizon", 1)

    rng = _rng(seed, _PROBLEM_KEY)
    xbar = rng.standard_normal(n)
    spec = ProblemSpec(
        n=n,
        horizon=horizon,
        xbar=xbar,
        seed=seed,
        input_var=input_var,
        meas_var=meas_var,
        prior_var=prior_var,
    )
    theta = spec.prior_mean + np.sqrt(spec.prior_var) * rng.standard_normal(n)
    noise = np.sqrt(spec.meas_var) * _rng(seed, _NOISE_KEY).standard_normal(horizon)
    return spec, GroundTruth(theta=theta, noise_draws=noise)


def stream(spec: ProblemSpec, truth: GroundTruth, t: int) -> Observation:
    """Observation ``t``: x ~ N(x̄, input_var·I), y = xᵀθ + η_t.

    The input is drawn from an RNG keyed on (seed, t) alone, so any step can be
    requested in any order with identical results.
    """
    t = _check_count(t, "t", 0)
    if t >= spec.horizon:
        raise ArgumentError(f"step {t} out of range for horizon {spec.horizon}")
    truth.check_against(spec)
    rng = _rng(spec.seed, _STEP_KEY, t)
    x = spec.xbar + np.sqrt(spec.input_var) * rng.standard_normal(spec.n)
    y = float(x @ truth.theta + truth.noise_draws[t])
    return Observation(x=x, y=y)
