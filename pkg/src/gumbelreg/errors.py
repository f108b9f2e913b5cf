"""Exception hierarchy shared by the package."""


class GumbelRegError(Exception):
    """Base class for all package errors."""


class DomainError(GumbelRegError, ValueError):
    """An argument lies outside the domain of a function."""


class FormulaError(GumbelRegError, ValueError):
    """Base class for predictor-formula problems."""


class FormulaSyntaxError(FormulaError):
    """Malformed formula text.

    Attributes
    ----------
    offset : int
        Byte offset (0-based) into the formula text where parsing failed.
    """

    def __init__(self, message, offset, text=""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} at byte offset {offset}")


class UnknownIdentifierError(FormulaSyntaxError):
    pass


class ArityError(FormulaSyntaxError):
    pass


class ObservationDomainError(DomainError):
    """A per-observation quantity left its domain at observation ``index`` (1-based)."""

    def __init__(self, message, index):
        self.index = index
        super().__init__(f"{message} at observation {index}")


class FormulaDomainError(FormulaError, ObservationDomainError):
    """Formula evaluated outside its domain (log of a non-positive value, ...)."""


class ModelError(GumbelRegError, ValueError):
    """Invalid model specification or model/data mismatch."""


class DataError(GumbelRegError, ValueError):
    """Invalid or unreadable dataset."""


class SingularMatrixError(GumbelRegError, ArithmeticError):
    """A matrix that must be inverted is singular or not positive definite."""

    def __init__(self, factor, detail=""):
        self.factor = factor
        msg = f"singular matrix: {factor}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class FitError(GumbelRegError, RuntimeError):
    """Maximum likelihood fitting failed."""

    def __init__(self, message, which=None):
        self.which = which
        super().__init__(message)


class SimulationError(GumbelRegError, RuntimeError):
    """Systematic failure inside a Monte Carlo study."""
