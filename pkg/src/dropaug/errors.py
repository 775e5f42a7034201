"""Exception hierarchy shared by all dropaug modules.

Every error carries a ``kind`` string that the CLI maps to an exit code
and to the machine-readable JSON it prints on stderr.
"""


class DropaugError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"
    exit_code = 1


class UsageError(DropaugError):
    """Bad command-line invocation."""

    kind = "usage"
    exit_code = 2


class ConfigError(DropaugError):
    """Invalid configuration value, unknown key, or inconsistent setup."""

    kind = "config"
    exit_code = 2


class ShapeError(ConfigError):
    """Tensor shapes do not line up. Message names both shapes."""

    kind = "config"
    exit_code = 2


class DomainError(ConfigError):
    """A numeric argument is outside its documented domain."""

    kind = "config"
    exit_code = 2


class IoError(DropaugError):
    """A required file is missing or unreadable."""

    kind = "io"
    exit_code = 3


class FormatError(DropaugError):
    """A file exists but its contents do not parse."""

    kind = "format"
    exit_code = 3


class NumericError(DropaugError):
    """A computation produced NaN/Inf or otherwise diverged."""

    kind = "numeric"
    exit_code = 4


class StateError(DropaugError):
    """A required artifact (checkpoint, fitted model) is absent."""

    kind = "state"
    exit_code = 5
