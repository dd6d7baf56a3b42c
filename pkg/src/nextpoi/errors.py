"""Exception hierarchy shared by every stage of the pipeline."""


class NextPoiError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ParseError(NextPoiError):
    exit_code = 4

    def __init__(self, lineno, field, message):
        self.lineno = lineno
        self.field = field
        super().__init__(f"line {lineno}: field '{field}': {message}")


class EmptyDatasetError(NextPoiError):
    exit_code = 5


class ConfigError(NextPoiError):
    exit_code = 2


class FeaturizationError(NextPoiError):
    exit_code = 5


class FitError(NextPoiError):
    exit_code = 5


class ModelFormatError(NextPoiError):
    exit_code = 4


class SamplingError(NextPoiError):
    exit_code = 5


class TrainingDiverged(NextPoiError):
    """Raised when an update produces non-finite parameters.

    ``last_good`` holds the parameters from the last completed epoch.
    """

    exit_code = 7

    def __init__(self, message, last_good=None, trace=None):
        super().__init__(message)
        self.last_good = last_good
        self.trace = trace or []


class FingerprintMismatch(NextPoiError):
    exit_code = 6


class EvaluationError(NextPoiError):
    exit_code = 5
