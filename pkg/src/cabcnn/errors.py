"""Exception hierarchy shared by every module."""


class CabCnnError(Exception):
    """Base class for all package errors."""


class ShapeError(CabCnnError, ValueError):
    pass


class ConfigError(CabCnnError, ValueError):
    pass


class DegenerateError(CabCnnError, ValueError):
    """Statistics or scores are undefined for the given input."""


class InputTooShortError(CabCnnError, ValueError):
    pass


class WavParseError(CabCnnError, ValueError):
    pass


class CheckpointError(CabCnnError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class NumericError(CabCnnError, ArithmeticError):
    """A non-finite value appeared where finite numbers are required."""
