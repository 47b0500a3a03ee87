"""Exception hierarchy shared across the package."""


class GradLeakError(Exception):
    """Base class for all errors raised by gradleak."""


class ShapeError(GradLeakError, ValueError):
    """Input or parameter shapes do not conform to the model."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer!r}: {message}"
        super().__init__(message)
        self.layer = layer


class DimensionError(GradLeakError, ValueError):
    """Flat vector length disagrees with the parameter count."""


class NumericalOverflowError(GradLeakError, ArithmeticError):
    """A non-finite value appeared during evaluation."""


class ConfigError(GradLeakError, ValueError):
    """Invalid configuration value or constraint violation."""


class AggregationError(GradLeakError, ValueError):
    """Aggregator preconditions were violated."""


class AttackAborted(GradLeakError, RuntimeError):
    """Every temporal optimization collapsed in the same global round."""


class FormatError(GradLeakError, ValueError):
    """Malformed file contents (bad magic, truncated body, count mismatch)."""

    def __init__(self, message, path=None, offset=None):
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__("; ".join(parts))
        self.path = path
        self.offset = offset
