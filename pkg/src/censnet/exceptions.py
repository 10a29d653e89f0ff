"""Exception hierarchy shared across the package."""


class CensNetError(Exception):
    """Base class for all package errors."""


class ShapeError(CensNetError, ValueError):
    """Operand shapes or sparsity patterns are incompatible."""


class ValidationError(CensNetError, ValueError):
    """Input data violates a documented invariant."""


class ContractError(CensNetError, ValueError):
    """A precondition of an operation was not met."""


class ConstructionError(CensNetError, ValueError):
    """A derived structure (gate index, bundle, batch) cannot be built."""


class UnsupportedInputError(CensNetError, ValueError):
    """The input is well formed but outside what the model supports (e.g. multigraphs)."""


class DataFormatError(CensNetError, ValueError):
    """A dataset file failed to parse.

    ``record`` carries the offending line or record id when known.
    """

    def __init__(self, message, path=None, record=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if record is not None:
            where += f" (record {record})"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.record = record


class NumericalError(CensNetError, ArithmeticError):
    """A computation produced NaN or inf (diverged training, overflow)."""
