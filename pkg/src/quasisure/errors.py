"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Bad argument value (nonpositive horizon, off-grid time, shape mismatch)."""


class UnsupportedDimension(ValueError):
    """Operation defined only for a particular state dimension."""


class InvalidSpec(ValueError):
    """A coefficient, payoff or experiment specification failed validation."""


class PartitionViolation(RuntimeError):
    """A path matched zero or several partition events of one level."""

    def __init__(self, message, path_ids=()):
        super().__init__(message)
        self.path_ids = tuple(int(i) for i in path_ids)


class InternalError(RuntimeError):
    """An internal consistency check failed (e.g. dynamic programming optimality)."""
