from __future__ import annotations


class GridMismatchError(ValueError):
    pass


class EmptyRegionError(ValueError):
    pass


class EmptyEffectiveSetError(ValueError):
    pass


class DofCapExceededError(ValueError):
    pass


class EllipticityError(ValueError):
    pass


class StencilError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float = float('nan'), iterations: int = 0) -> None:
        super().__init__(message)
        self.residual: float = residual
        self.iterations: int = iterations


class SingularSystemError(RuntimeError):
    pass


class NewtonDivergenceError(RuntimeError):
    def __init__(self, message: str, residual_history: list[float] | None = None) -> None:
        super().__init__(message)
        self.residual_history: list[float] = list(residual_history or [])


class ExpressionError(ValueError):
    def __init__(self, message: str, expression: str = '', column: int | None = None) -> None:
        where = f' (column {column})' if column is not None else ''
        super().__init__(f'{message}{where}: {expression!r}' if expression else message)
        self.reason: str = message
        self.expression: str = expression
        self.column: int | None = column


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None) -> None:
        where = f' at line {line}, column {column}' if line is not None else ''
        super().__init__(f'{message}{where}')
        self.line: int | None = line
        self.column: int | None = column


class ScenarioValidationError(ValueError):
    def __init__(self, invariant: str, message: str) -> None:
        super().__init__(f'[{invariant}] {message}')
        self.invariant: str = invariant


class MissingOutputError(FileNotFoundError):
    pass
