"""Exception hierarchy shared by every module of the package."""


class MKFusionError(Exception):
    """Base class for all package errors."""


class ShapeError(MKFusionError, ValueError):
    """Operand dimensions are incompatible."""


class ConfigurationError(MKFusionError, ValueError):
    """A layer, model, or run configuration is invalid."""


class ArgumentError(MKFusionError, ValueError):
    """A scalar argument is outside its admissible range."""


class BandOverflowError(MKFusionError, ValueError):
    """Input band count exceeds the nested kernel capacity ``c_max``."""


class UnsupportedScaleError(MKFusionError, ValueError):
    """Requested output grid is smaller than the input grid."""


class DegenerateBandError(MKFusionError, ValueError):
    """A reference band has zero mean, so relative errors are undefined."""

    def __init__(self, band: int):
        super().__init__(f"band {band} of the reference has zero mean")
        self.band = band


class StateError(MKFusionError, RuntimeError):
    """An operation was invoked without the state it depends on."""


class FormatError(MKFusionError, ValueError):
    """A binary or text file does not follow its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(MKFusionError, ArithmeticError):
    """A loss or gradient became non-finite."""
