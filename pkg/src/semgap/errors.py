"""Exception hierarchy. The CLI maps each family to an exit code."""


class SemgapError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(SemgapError):
    """Invalid configuration, malformed file, or contract violation by the caller."""

    exit_code = 2


class ShapeError(ConfigError):
    pass


class SerializationError(ConfigError):
    pass


class SearchFailure(SemgapError):
    """A search (guard-bias threshold, trigger reversal) found nothing acceptable."""

    exit_code = 3

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class NumericError(SemgapError):
    """NaN/inf produced where finite values are required, or training divergence."""

    exit_code = 4
