"""
Exception hierarchy.

Every error raised by the library carries a short ``category`` that the CLI
prints as a machine-parsable prefix.
"""


class FloodDANError(Exception):
    category = "error"


class SchemaError(FloodDANError):
    category = "schema"


class IntegrityError(FloodDANError):
    category = "integrity"


class DataError(FloodDANError):
    category = "data"


class ConfigurationError(FloodDANError):
    category = "configuration"


class SizeError(FloodDANError):
    category = "size"


class DimensionError(FloodDANError):
    category = "dimension"


class MetricError(FloodDANError):
    category = "metric"


class DivergenceError(FloodDANError):
    """A loss became non-finite during training."""

    category = "divergence"

    def __init__(self, message: str, step: int, last_finite_loss: float | None, epoch: int | None = None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


class CheckpointError(FloodDANError):
    category = "checkpoint"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ArchitectureMismatchError(CheckpointError):
    category = "architecture"


class DependencyError(FloodDANError):
    """An upstream artifact required by a command does not exist."""

    category = "dependency"

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


class ParseError(FloodDANError):
    category = "parse"

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"{message} (line {line})")
        self.line = line
