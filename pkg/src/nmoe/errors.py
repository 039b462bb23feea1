"""Error hierarchy shared by all modules.

Each class carries the process exit code and the short category name
printed by the command-line entry point.
"""


class NmoeError(Exception):
    """Base class for every error this package raises deliberately."""

    exit_code = 1
    category = "error"


class ConfigError(NmoeError):
    """Invalid or mutually inconsistent configuration values."""

    exit_code = 2
    category = "config"


class DataError(NmoeError):
    """Dataset contents violate a documented precondition."""

    exit_code = 3
    category = "data"


class FormatError(NmoeError):
    """A file or artifact does not match its documented layout."""

    exit_code = 4
    category = "format"


class TrainingError(NmoeError):
    """Training produced non-finite values or otherwise diverged."""

    exit_code = 5
    category = "training"


class InternalError(NmoeError):
    """An invariant that should be unreachable was violated."""

    exit_code = 6
    category = "internal"
