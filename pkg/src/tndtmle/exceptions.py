"""Exception hierarchy shared by all modules."""


class TNDError(Exception):
    """Base class for package errors."""


class DataError(TNDError):
    """Malformed input data, schema mismatch or missingness violation."""


class ConfigError(TNDError):
    """Invalid configuration (CLI, simulation or learner settings)."""


class EstimationError(TNDError):
    """A fit could not be completed."""


class SeparationError(EstimationError):
    """Complete or quasi-complete separation in a logistic fit."""


class ConvergenceError(EstimationError):
    """An iterative solver exhausted its iteration budget."""


class SingularMatrixError(EstimationError):
    """A scaling or information matrix is not invertible."""


class DesignInfeasibleError(TNDError):
    """A two-phase sampling design cannot be met for this cohort."""
