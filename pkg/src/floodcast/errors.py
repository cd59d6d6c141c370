"""Exception types shared across the package."""


class FloodcastError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(FloodcastError):
    """Operand shapes do not satisfy an operation's contract."""


class ConfigurationError(FloodcastError):
    """A configuration value is outside its legal range."""


class ContractError(FloodcastError):
    """An API precondition was violated by the caller."""


class NumericError(FloodcastError):
    """A computation produced or received non-finite values."""


class DegenerateVarianceError(NumericError):
    """Batch statistics are undefined (fewer than two elements per channel)."""


class DivergenceError(NumericError):
    """Training or simulation state became non-finite.

    Carries enough context (epoch/batch or step index) to locate the blow-up.
    """

    def __init__(self, message, *, epoch=None, batch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.step = step


class UndefinedMetricError(FloodcastError):
    """A metric has no defined value (e.g. empty confusion matrix)."""


class NoPositivesError(UndefinedMetricError):
    """A curve requires at least one positive label."""


class WindowError(FloodcastError):
    """A feature window does not fit inside the available trace."""


class ParseError(FloodcastError):
    """A data file is malformed. ``line`` is 1-based when known."""

    def __init__(self, message, *, path=None, line=None):
        prefix = ""
        if path is not None:
            prefix += f"{path}:"
        if line is not None:
            prefix += f"{line}:"
        super().__init__(f"{prefix} {message}" if prefix else message)
        self.path = path
        self.line = line


class ModelIOError(FloodcastError):
    """Base class for model-file load failures."""


class CorruptModelError(ModelIOError):
    """The model file is truncated, mangled, or fails its checksum."""


class ModelVersionError(ModelIOError):
    """The model file uses an unsupported format version."""


class ModelShapeError(ModelIOError):
    """Tensor shapes in the model file contradict its own config block."""
