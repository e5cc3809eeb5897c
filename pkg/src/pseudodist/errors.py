"""Exception hierarchy. The CLI maps these onto exit codes."""


class PseudoDistError(Exception):
    pass


class ConfigError(PseudoDistError, ValueError):
    """Invalid configuration or hyperparameter."""


class DimensionError(PseudoDistError, ValueError):
    """Shape mismatch between operands."""


class BatchError(PseudoDistError, ValueError):
    """A minibatch that cannot produce the requested pairs."""


class DataError(PseudoDistError, ValueError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    """A file does not follow its container format."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class MetricError(PseudoDistError, ValueError):
    """A metric is undefined for the given scores (e.g. one-sided labels)."""


class NumericError(PseudoDistError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingDiverged(NumericError):
    """Raised when the loss becomes non-finite; carries the last good bundle."""

    def __init__(self, message, bundle=None, log=None):
        super().__init__(message)
        self.bundle = bundle
        self.log = log if log is not None else []
