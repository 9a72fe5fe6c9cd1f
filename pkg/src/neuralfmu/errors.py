"""Exception hierarchy shared by all modules."""


class NeuralFMUError(Exception):
    """Base class for every error raised by this package."""


class DescriptionError(NeuralFMUError, ValueError):
    """A model description violates its structural invariants."""


class ParseError(NeuralFMUError, ValueError):
    """Malformed modelDescription XML, archive or CSV input."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PhaseError(NeuralFMUError, RuntimeError):
    """An instance call was made in a lifecycle phase that forbids it."""


class CausalityError(NeuralFMUError, ValueError):
    """A variable write is not permitted for its causality in this phase."""


class CapabilityError(NeuralFMUError, RuntimeError):
    """An optional capability (directional derivatives, snapshots) is missing."""


class SolverError(NeuralFMUError, RuntimeError):
    """Numerical integration failed (step underflow, step budget, NaN)."""


class EventError(NeuralFMUError, RuntimeError):
    """Event location failed or events are not supported on this path."""


class TrainingDivergence(NeuralFMUError, RuntimeError):
    """The training loss or the rollout became non-finite."""
