"""Exception types shared across the package."""


class TubekitError(Exception):
    """Base class for all tubekit errors."""


class ConfigError(TubekitError):
    """A configuration value or file violates the schema or an invariant."""


class EmptyGrid(TubekitError):
    """A tube produces zero windows on some axis (offset + kernel > input)."""

    def __init__(self, message: str, tube_index: int | None = None, axis: str | None = None):
        super().__init__(message)
        self.tube_index = tube_index
        self.axis = axis


class BadGrouping(TubekitError):
    """A tube's space-to-depth factor does not divide the hidden size."""


class StrideNotDivisible(TubekitError):
    """A space-to-depth grouping factor does not divide its stride."""


class GridNotDivisible(TubekitError):
    """A pre-merge grid axis is not divisible by its grouping factor."""


class ShapeMismatch(TubekitError):
    """An array's shape disagrees with what the configuration implies."""


class NonFinite(TubekitError):
    """An activation or loss became NaN/Inf (training divergence)."""


class UnknownHead(TubekitError):
    """A classification head name was requested that does not exist."""


class MissingTrace(TubekitError):
    """backward() was called without a training-mode forward trace."""


class IncompatibleWidths(TubekitError):
    """Small-model token width does not divide the large hidden size."""


class CorruptManifest(TubekitError):
    """A checkpoint file is truncated or its manifest cannot be parsed."""


class BadClipFile(TubekitError):
    """A raw clip file is missing, truncated, or has a bad header."""
