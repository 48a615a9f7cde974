"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class MMBMError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MMBMError, ValueError):
    """Invalid or unknown configuration key; ``key`` carries the dotted path."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class DataError(MMBMError):
    """Input data does not satisfy a stage's contract."""


class MalformedRow(DataError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class SchemaMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class UnknownStateKey(DataError):
    pass


class MissingFeature(DataError):
    pass


class UnknownFeature(DataError):
    pass


class DuplicateName(MMBMError, ValueError):
    pass


class ModelCountMismatch(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyCohort(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class NonFiniteQ(DataError):
    pass


class InvalidGamma(MMBMError, ValueError):
    pass


class SolverError(MMBMError):
    """The LP backend failed to return an optimal solution."""


class Infeasible(SolverError):
    pass


class NumericalFailure(SolverError):
    pass


class NonConvergence(UserWarning):
    """Training stopped at ``max_epochs`` above the convergence tolerance."""


class SingleClassDegenerate(UserWarning):
    """The cloning baseline saw a single action label and became constant."""
