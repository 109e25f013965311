"""Exception hierarchy shared by every paresseg module."""


class PaResSegError(Exception):
    """Base class for all library errors."""


class DimensionError(PaResSegError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(PaResSegError, ValueError):
    """A configuration value or layer hyperparameter is invalid."""


class UsageError(PaResSegError, RuntimeError):
    """An API was called in a state or mode where it is not allowed."""


class FormatError(PaResSegError, ValueError):
    """An on-disk file does not match the expected layout."""


class SamplingError(PaResSegError, RuntimeError):
    """A training patch could not be drawn from a case."""


class GenerationError(PaResSegError, RuntimeError):
    """The phantom generator could not satisfy its placement constraints."""


class InferenceError(PaResSegError, RuntimeError):
    """Whole-volume inference cannot run on the given inputs."""


class DivergenceError(PaResSegError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class UndefinedMetricError(PaResSegError, ValueError):
    """A metric has no value for the given counts (e.g. RVD on an empty ground truth)."""
