"""Exception types shared across the package."""


class SingularityError(ValueError):
    """An operation hit a point too close to the simplex boundary to invert."""


class NotApplicableError(ValueError):
    """The hypotheses of a constructive result do not hold for the given input."""


class ConvergenceError(RuntimeError):
    """An iterative scheme exhausted its iteration budget before reaching tolerance."""


class ImageFormatError(ValueError):
    """An image file is malformed, truncated, or uses an unsupported variant."""
