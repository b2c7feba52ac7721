"""Exception and warning types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ParameterError(ValueError):
    """An argument is outside its legal range."""


class GraphError(RuntimeError):
    """A backward pass was requested on an invalid target."""


class StateError(RuntimeError):
    """An operation was invoked before its required state exists."""


class DataError(RuntimeError):
    """A data split does not satisfy the operation's preconditions."""


class ConfigurationError(RuntimeError):
    """The run configuration is inconsistent or incomplete."""


class FormatError(RuntimeError):
    """A container file is corrupt or has the wrong format."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


class GenerationError(RuntimeError):
    """Synthetic geometry could not be realized after repeated attempts."""


class DegenerateTestError(ValueError):
    """A statistic is undefined because its variance term is zero."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given masks."""


class ConvergenceWarning(UserWarning):
    """Training loss increased beyond the expected full-batch tolerance."""


class DegenerateTractWarning(UserWarning):
    """A regression target had identical labels on every voxel."""
