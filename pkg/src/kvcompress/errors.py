"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad shapes, bad config values, malformed files."""


class NumericError(RuntimeError):
    """Numerical failure: non-finite data, singular systems, degenerate inputs."""
