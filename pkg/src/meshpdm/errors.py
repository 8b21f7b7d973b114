"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented invariant (bad shapes, bad files, bad config)."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf instead of propagating it silently."""


class CheckpointError(ValidationError):
    """Checkpoint file is missing fields, corrupt, or from an incompatible version."""


class MeshConnectivityWarning(UserWarning):
    """The face-derived edge graph has more than one connected component."""
