"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its documented domain (bad shape, bad arg)."""


class NumericFailure(ArithmeticError):
    """An operation produced NaN or Inf."""


class DeterminismError(RuntimeError):
    """Two evaluations of a supposedly deterministic function disagreed."""


class RegistryError(KeyError):
    """A character id could not be resolved in the charset registry."""


class InfeasibleTarget(ValueError):
    """CTC target longer than the frame sequence can represent."""


class TrainingImpossible(RuntimeError):
    """Every training instance was rejected (e.g. all CTC-infeasible)."""
