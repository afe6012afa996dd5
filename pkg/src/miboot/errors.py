"""Exception types shared across the package."""


class MibootError(Exception):
    """Base class for package errors."""


class DataFormatError(MibootError):
    """Malformed input data (CSV cells, config values, role mismatches)."""


class ConfigError(MibootError):
    """Invalid or incomplete run configuration."""


class EstimationError(MibootError):
    """Numerical failure in a full-sample estimator fit.

    Carries optional context (e.g. the Newton iteration trace for a
    non-convergent probit fit) in ``context``.
    """

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context


class GibbsError(MibootError):
    """Numerical failure inside the Gibbs sampler.

    ``iteration`` is the 0-based sweep index at which the failure occurred.
    """

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
