"""Exception types shared across the package."""


class HyloError(Exception):
    """Base class for every error raised by hylovqa."""


class ShapeError(HyloError, ValueError):
    pass


class EmptyInputError(HyloError, ValueError):
    pass


class ContractError(HyloError, ValueError):
    """A documented precondition or postcondition does not hold."""


class NumericDomainError(HyloError, ArithmeticError):
    """A NaN/Inf showed up where a finite value is required."""


class StateError(HyloError, RuntimeError):
    pass


class ConfigError(HyloError, ValueError):
    pass


class IntegrityError(HyloError, IOError):
    """A persisted file is truncated, corrupted or inconsistent with its header."""
