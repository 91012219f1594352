"""Exception hierarchy shared by every module."""


class QuantCycleError(Exception):
    """Base class for library errors."""


class ValidationError(QuantCycleError, ValueError):
    """Input data or parameters violate a documented contract."""

    def __init__(self, message: str, row: int | None = None, path: str | None = None):
        self.row = row
        self.path = path
        prefix = ""
        if path is not None:
            prefix += f"{path}: "
        if row is not None:
            prefix += f"row {row}: "
        super().__init__(prefix + message)


class DegenerateInputError(QuantCycleError, ValueError):
    """Inputs are well-formed but the requested quantity is undefined."""


class RankDeficiencyError(DegenerateInputError):
    """Design matrix does not have full column rank."""


class ConvergenceError(QuantCycleError, RuntimeError):
    """An iterative procedure stopped before meeting its tolerance.

    ``best`` carries the best-so-far result when one exists.
    """

    def __init__(self, message: str, residual: float | None = None, best=None):
        self.residual = residual
        self.best = best
        super().__init__(message)
