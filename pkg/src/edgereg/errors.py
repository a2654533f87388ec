"""Exception types shared across the package."""


class EdgeRegError(Exception):
    """Base class for all package errors."""


class ShapeError(EdgeRegError, ValueError):
    """A tensor operation received operands with incompatible shapes."""


class NumericError(EdgeRegError, ArithmeticError):
    """A forward evaluation produced a non-finite value."""


class GraphStateError(EdgeRegError, RuntimeError):
    """A graph operation was called in the wrong order."""


class ContractError(EdgeRegError, ValueError):
    """A precondition of a public operation was violated."""


class FormatError(EdgeRegError, ValueError):
    """An input file does not follow the expected layout."""


class DegeneracyError(EdgeRegError, ValueError):
    """Geometric input is degenerate (e.g. collinear points for PnP)."""


class SpecError(EdgeRegError, ValueError):
    """A synthetic scene description cannot produce a frame."""
