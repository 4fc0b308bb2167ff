"""Exception hierarchy shared by every module.

The CLI maps ``ValidationError`` to exit code 1 and ``StabilityError`` to 2.
"""


class AclabError(Exception):
    """Base class for all package errors."""


class ValidationError(AclabError, ValueError):
    """Malformed input: wrong shapes, invalid probabilities, bad parameters."""


class StabilityError(AclabError):
    """A stability or modelling assumption needed by an operation does not hold."""


class AssumptionViolation(StabilityError):
    """Behavior policy / Markov chain assumption failure (support, irreducibility, aperiodicity)."""

    def __init__(self, message: str, states=None):
        super().__init__(message)
        self.states = sorted(states) if states is not None else None


class InfeasibleTruncation(StabilityError):
    """No lower truncation level in [0, 1] normalizes the two-sided factors for a state."""

    def __init__(self, message: str, state: int):
        super().__init__(message)
        self.state = state


class PreconditionError(StabilityError):
    """A stepsize precondition of a finite-sample bound is violated."""

    def __init__(self, message: str, bound: str):
        super().__init__(message)
        self.bound = bound


class DegenerateSupport(StabilityError):
    """A policy puts zero mass where a logarithm of it is needed."""
