"""Exception hierarchy shared by every saenet module."""


class SaenetError(Exception):
    """Base class for all library errors."""


class DimensionError(SaenetError, ValueError):
    """An operand has the wrong rank or a mismatched axis."""


class ConfigurationError(SaenetError, ValueError):
    """A layer, block or architecture description is inconsistent."""


class DegenerateBatchError(SaenetError, ValueError):
    """Batch statistics requested from fewer than two values per channel."""


class DataFormatError(SaenetError, ValueError):
    """A dataset file or label is malformed."""


class ContractError(SaenetError, RuntimeError):
    """A call violated a documented precondition (e.g. non-scalar loss)."""


class NumericalError(SaenetError, ArithmeticError):
    """A NaN or Inf showed up where finite numbers were required."""
