"""Exception hierarchy shared by every module."""


class DinoMMError(Exception):
    """Base class for all package errors."""


class DimensionError(DinoMMError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(DinoMMError, ValueError):
    """A scalar argument is outside its admissible range."""


class NumericDomainError(DinoMMError, ArithmeticError):
    """A value left the domain of an op, or a NaN/Inf was produced."""


class ContractError(DinoMMError, RuntimeError):
    """A caller violated an operation's precondition."""


class ConfigError(DinoMMError, ValueError):
    """An invalid configuration value."""


class InputError(DinoMMError, ValueError):
    """Input data cannot be processed (e.g. a degenerate image)."""


class FormatError(DinoMMError, ValueError):
    """A binary file failed validation; ``field`` names what failed."""

    def __init__(self, field: str, detail: str = ""):
        self.field = field
        msg = field if not detail else f"{field}: {detail}"
        super().__init__(msg)
