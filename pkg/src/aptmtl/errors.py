"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Input violates a documented precondition (shape, finiteness, range)."""


class DegeneratePolarError(InvalidInputError):
    """The exact polar factor is undefined because the matrix is rank deficient."""

    def __init__(self, rank, full_rank):
        self.rank = rank
        self.full_rank = full_rank
        super().__init__(f"polar factor undefined: numerical rank {rank} < {full_rank}")


class ZeroGradientError(InvalidInputError):
    """A gradient that must be nonzero is identically zero."""


class UndefinedCosineError(InvalidInputError):
    """Cosine similarity requested with a zero-norm argument."""

    def __init__(self, message, task=None):
        self.task = task
        super().__init__(message)


class UndefinedRankError(InvalidInputError):
    """Effective rank of the zero matrix."""


class ConfigError(Exception):
    """Run configuration is malformed or references unknown identifiers."""


class NumericalFailure(RuntimeError):
    """A run produced non-finite values."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)
