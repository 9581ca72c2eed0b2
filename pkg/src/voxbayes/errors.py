"""Exception hierarchy shared by every voxbayes module."""


class VoxBayesError(Exception):
    """Base class for all package errors."""


class ShapeError(VoxBayesError, ValueError):
    pass


class ConfigError(VoxBayesError, ValueError):
    pass


class NumericalError(VoxBayesError, ArithmeticError):
    pass


class BackwardError(VoxBayesError, RuntimeError):
    """Raised for a non-scalar root or a repeated backward pass."""


class FormatError(VoxBayesError, ValueError):
    pass


class UnsupportedRank(FormatError):
    pass


class UnsupportedDatatype(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class UndefinedMetric(VoxBayesError, ValueError):
    pass


class TooManyPatches(VoxBayesError, ValueError):
    pass
