"""Exception hierarchy shared by every parsim module."""


class ParsimError(Exception):
    """Base class for all parsim errors"""


class ConfigError(ParsimError, ValueError):
    """Invalid configuration value or violated precondition"""


class ShapeError(ParsimError, ValueError):
    """Dimension or shape mismatch"""


class NumericError(ParsimError, ValueError):
    """Non-finite value entering a public operation"""


class CompressionError(ParsimError, ValueError):
    """Malformed compressed gradient or compressor parameter"""


class PlacementError(ParsimError):
    """Strategy does not fit on the topology"""


class DatasetError(ParsimError):
    """Dataset missing, empty or malformed"""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CalibrationError(ParsimError):
    """Calibration targets are degenerate or cannot be fitted"""


class RunArtifactError(ParsimError):
    """A run directory lacks the files a report needs"""
