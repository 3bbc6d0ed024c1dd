"""Exception types raised across the package."""


class SwgSimError(Exception):
    """Base class for all package errors."""


class ShapeError(SwgSimError, ValueError):
    pass


class InvalidNoiseLevelError(SwgSimError, ValueError):
    pass


class MissingConditionError(SwgSimError, ValueError):
    """A class-conditional denoiser was called without a class id."""


class DegenerateDirectionError(SwgSimError, ArithmeticError):
    """The guidance direction is (numerically) zero, so the optimal weight is undefined."""


class IncompatibleRuleError(SwgSimError, ValueError):
    pass


class ValidationError(SwgSimError, ValueError):
    pass


class PlanError(ValidationError):
    """Invalid sliding-window plan (non-square N, non-integral stride, ...)."""


class IncompatibleDenoiserError(SwgSimError, TypeError):
    pass


class UndefinedMetricError(SwgSimError, ValueError):
    pass


class ConfigError(SwgSimError, ValueError):
    pass


class DegenerateMaskWarning(UserWarning):
    """A masked rule whose mask is all zeros; guidance has no effect."""
