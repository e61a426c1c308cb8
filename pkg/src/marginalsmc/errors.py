"""Exception hierarchy shared across the package."""


class MarginalSmcError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MarginalSmcError):
    """A configuration file or CLI argument is invalid or incomplete."""


class DegenerateWeightsError(MarginalSmcError):
    """A log-weight vector contains no finite entry."""


class ExtinctionError(DegenerateWeightsError):
    """All particle weights vanished simultaneously.

    The target sequence assumes strictly positive weights everywhere, so a
    weight vector that is identically zero indicates a broken model or a
    proposal with the wrong support, not a recoverable numerical event.
    """


class QuadratureDriftError(MarginalSmcError):
    """Grid quadrature lost too much probability mass to be trusted."""


class QuadratureDriftWarning(RuntimeWarning):
    """Grid quadrature is visibly losing probability mass.

    Report-style consumers keep going; the variance computations escalate
    this to :class:`QuadratureDriftError`.
    """


class IntractableDensityError(MarginalSmcError):
    """A density was evaluated that is only available as a sampler.

    Raised by simulator-based kernels (for example in likelihood-free
    inference) whose pointwise density must never enter a weight formula.
    """
