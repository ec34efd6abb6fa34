"""Exception hierarchy for tncompress.

CLI exit codes are derived from these classes in main.py.
"""


class TncompressError(Exception):
    """Base class for all package errors"""


class ShapeError(TncompressError, ValueError):
    """Dimension mismatch, out-of-range axis, bad permutation or size mismatch"""


class TapeError(TncompressError):
    """Misuse of an autodiff tape (cross-tape inputs, non-scalar loss)"""


class MissingGradError(TncompressError):
    """Optimizer step requested for a parameter that has no gradient"""


class ConfigError(TncompressError, ValueError):
    """Invalid run configuration"""


class DataFormatError(TncompressError, ValueError):
    """Malformed dataset file"""


class BadMagicError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class CheckpointError(TncompressError, ValueError):
    """Unreadable, corrupted or inconsistent checkpoint"""


class NumericError(TncompressError, ArithmeticError):
    """Non-finite values during optimization"""
