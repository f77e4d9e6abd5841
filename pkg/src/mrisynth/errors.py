"""Exception types shared across the pipeline."""


class SynthError(Exception):
    """Base class; ``kind`` is the machine-readable tag the CLI prints."""

    kind = "error"


class FormatError(SynthError, ValueError):
    kind = "format"


class DimensionalityError(SynthError, ValueError):
    kind = "dimensionality"


class ConsistencyError(SynthError, ValueError):
    kind = "consistency"


class MissingInputError(SynthError, FileNotFoundError):
    kind = "missing-input"


class DegenerateHistogramError(SynthError, ValueError):
    kind = "degenerate-histogram"


class DegenerateRangeError(SynthError, ValueError):
    kind = "degenerate-range"


class ShapeError(SynthError, ValueError):
    kind = "shape"


class ArgumentError(SynthError, ValueError):
    kind = "argument"


class EmptyRegionError(SynthError, ValueError):
    kind = "empty-region"


class DependencyError(SynthError, RuntimeError):
    kind = "dependency"


class SpecError(SynthError, ValueError):
    kind = "spec"


class ConfigError(SynthError, ValueError):
    kind = "config"


class NonFiniteLossError(SynthError, FloatingPointError):
    kind = "non-finite-loss"
