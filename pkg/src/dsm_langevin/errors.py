"""Exception types shared across the package."""


class StabilityViolation(ValueError):
    """A step size is outside the region where the iteration is stable."""


class SingularSystem(ValueError):
    """A dense linear system is numerically singular."""


class DomainError(ValueError):
    """Arguments are outside the domain of a closed-form expression."""


class InvalidN(ValueError):
    """Dataset size is not usable (N must be >= 2)."""


class NotSPD(ValueError):
    """A matrix declared symmetric positive definite is not."""
