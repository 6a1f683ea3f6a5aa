"""Exception and warning types raised across the package."""


class PdregError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class NotSpd(PdregError):
    """A matrix expected to be symmetric positive (semi)definite is not."""


class NonFinite(PdregError):
    """An integration produced NaN or infinite coordinates."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DimensionMismatch(PdregError):
    pass


class TooFewSamples(PdregError):
    pass


class BadShapeParams(PdregError):
    pass


class NotConverged(UserWarning):
    """Optimization stopped at max_iters; the result is still returned."""


class DuplicatePoints(UserWarning):
    """Two kernel centres coincide; the kernel matrix is rank deficient."""


class FormatError(PdregError):
    """An input file does not follow the expected layout."""


class OutputExists(PdregError):
    """Refusing to overwrite an existing file or one of the inputs."""
