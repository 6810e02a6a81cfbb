"""Exception taxonomy shared across the package.

Estimation pipelines catch ``EstimationError`` subclasses to count replicate
failures; anything else is a genuine bug and propagates.
"""


class IcefreeError(Exception):
    """Base class for all package errors."""


class InvalidDataError(IcefreeError):
    """Non-finite or structurally invalid numeric input."""


class RankDeficientError(IcefreeError):
    """Singular normal equations; names the collinear columns."""

    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"rank-deficient design, collinear columns: {self.columns}")


class DegenerateOutcomeError(IcefreeError):
    """Categorical outcome with a required class absent."""


class InsufficientDataError(IcefreeError):
    """Too few observations for the requested fit (n <= p)."""


class MonotonicityViolationError(IcefreeError):
    """An absorbing event flag reverted from 1 to 0."""

    def __init__(self, subject_id, visit):
        self.subject_id = subject_id
        self.visit = visit
        super().__init__(f"flag reverts 1->0 for subject {subject_id!r} at visit {visit}")


class DuplicateRowError(IcefreeError):
    """Duplicate (id, visit) pair in a long-format table."""


class UnimputableVariableError(IcefreeError):
    """A variable scheduled for imputation has no observed values."""


class InsufficientImputationsError(IcefreeError):
    """Pooling requires at least two completed datasets."""


class InsufficientCompleteCasesError(IcefreeError):
    """A complete-case model fit was left with fewer rows than parameters."""

    def __init__(self, model_name, message=None):
        self.model_name = model_name
        super().__init__(message or f"too few complete cases for model {model_name!r}")


class NonconvergenceError(IcefreeError):
    """Optimizer stopped before meeting tolerance; carries the best iterate."""

    def __init__(self, message, fit=None):
        self.fit = fit
        super().__init__(message)


class DegenerateBootstrapError(IcefreeError):
    """More than 10% of bootstrap replicates failed."""


class PositivityViolationError(IcefreeError):
    """Simulation scenario allows event hazards outside the permitted band."""


class SimulationError(IcefreeError):
    """Non-finite value produced during forward simulation."""


class ConfigError(IcefreeError):
    """Invalid or inconsistent run configuration."""


class SchemaError(IcefreeError):
    """Input data file does not match the expected schema."""
