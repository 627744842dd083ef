"""Exception types shared by the reconstruction library and the CLI.

The CLI maps these onto exit codes:
    ConfigError / DimensionMismatchError -> 1
    NumericalAbortError                  -> 2
"""


class TomographyError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TomographyError, ValueError):
    """Invalid geometry, solver configuration, phantom id or input file."""


class DimensionMismatchError(TomographyError, ValueError):
    """Shapes of tensors, images, sinograms or factors do not agree."""


class NumericalAbortError(TomographyError, ArithmeticError):
    """A solver produced or received non-finite values and cannot continue."""
