"""Exception types shared across the package."""


class SpikepenError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SpikepenError):
    """Array shapes or extents are incompatible with the operation."""


class ParameterError(SpikepenError):
    """A hyperparameter or option value is outside its valid range."""


class DataError(SpikepenError):
    """Input data violates a contract (labels out of range, empty set, ...)."""


class StateError(SpikepenError):
    """Operation called in an invalid order (e.g. backward before forward)."""


class ConfigError(SpikepenError):
    """Invalid experiment or model configuration."""


class FormatError(SpikepenError):
    """A file on disk does not match the expected binary format."""


class GraphError(SpikepenError):
    """A network graph violates a structural invariant."""


class NumericError(SpikepenError):
    """A non-finite value surfaced where a finite one is required."""
