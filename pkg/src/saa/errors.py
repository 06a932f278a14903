"""Exception types shared across the package."""


class SAAError(Exception):
    """Base class for all package errors."""


class DimensionError(SAAError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class ContractError(SAAError, ValueError):
    """A documented precondition was violated."""


class NumericalError(SAAError, ArithmeticError):
    pass


class InfeasibleAlignmentError(SAAError, ValueError):
    """The target is longer than the lattice, so no alignment exists."""


class OracleSizeError(SAAError, ValueError):
    pass


class ConfigError(SAAError, ValueError):
    pass


class CheckpointError(SAAError, ValueError):
    pass


class DataError(SAAError, ValueError):
    pass


class InputTooShortError(SAAError, ValueError):
    pass


class UndefinedCERError(SAAError, ValueError):
    """Empty reference scored against a non-empty hypothesis."""
