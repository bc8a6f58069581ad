class RiseError(Exception):
    """Base error; `category` is the one-word tag the CLI prints on failure"""
    category = "error"


class InvalidArgument(RiseError, ValueError):
    category = "invalid-argument"


class UnrecoverableView(RiseError):
    category = "unrecoverable-view"


class MissingPrerequisite(RiseError):
    category = "missing-prerequisite"


class OutputExists(RiseError):
    category = "output-exists"


class CorruptCheckpoint(RiseError):
    category = "corrupt-checkpoint"


class ConfigError(RiseError):
    category = "config-error"
