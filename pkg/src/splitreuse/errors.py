"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not line up."""


class ConfigError(ValueError):
    """A configuration value violates its documented range or invariant."""


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state (e.g. backward before forward)."""


class ModeError(RuntimeError):
    """Operation not available in the current topology."""


class ProtocolError(RuntimeError):
    """Wire or cache protocol violated."""


class TransportError(RuntimeError):
    """The transport failed to deliver a frame."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite gradients or loss)."""


class ComparisonError(ValueError):
    """Runs cannot be compared against each other."""
