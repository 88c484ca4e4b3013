"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config problems exit 2, data problems
exit 3, numerical failures exit 4.
"""


class FlexsdfError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FlexsdfError, ValueError):
    """An argument violates an operation's preconditions."""


class InvalidSpecError(InvalidInputError):
    """A tool specification has degenerate or inconsistent dimensions."""


class RegimeError(InvalidInputError):
    """A load falls outside the linear-elastic small-deflection regime."""


class ShapeError(InvalidInputError):
    """Tensor/array dimensions do not match the model configuration."""


class DatasetError(FlexsdfError):
    """Dataset on disk is missing, malformed, or inconsistent."""


class ConfigError(FlexsdfError):
    """Run configuration fails schema validation."""


class EmptySurfaceError(FlexsdfError):
    """Isosurface extraction found no zero crossing in the sampled grid."""


class NumericalError(FlexsdfError):
    """Optimization diverged (NaN/Inf loss) or a solver failed."""


class InvalidStateError(FlexsdfError):
    """Operation requires a trained/initialized model that is not available."""
