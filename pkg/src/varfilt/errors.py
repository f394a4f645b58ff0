"""Exception hierarchy for varfilt."""

from __future__ import annotations


class VarfiltError(Exception):
    """Base class for every error raised by varfilt."""


class ArgumentError(VarfiltError, ValueError):
    """Invalid argument: bad dimension, out-of-range index, non-positive variance."""


class SingularityError(VarfiltError, ArithmeticError):
    """A matrix that must be SPD turned out not to be."""


class FeasibilityError(VarfiltError, ArithmeticError):
    """γ lies outside the H∞ positivity region."""


class CapacityError(VarfiltError, ValueError):
    """A diagonal-plus-low-rank matrix would exceed its rank budget."""


class RunError(VarfiltError):
    """A filter failed while running a problem.

    Carries the sweep cell and step so a failing run can be replayed.
    """

    def __init__(
        self,
        message: str,
        *,
        dim: int | None = None,
        filter_name: str | None = None,
        problem: int | None = None,
        step: int | None = None,
    ) -> None:
        self.dim = dim
        self.filter_name = filter_name
        self.problem = problem
        self.step = step
        context = [
            f"{key}={value}"
            for key, value in (
                ("dim", dim),
                ("filter", filter_name),
                ("problem", problem),
                ("step", step),
            )
            if value is not None
        ]
        if context:
            message = f"{message} [{', '.join(context)}]"
        super().__init__(message)
