from __future__ import annotations
import io
import logging
import tokenize
import numpy as np
import sympy
from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations
from src.lattice import *

LOGGER = logging.getLogger(__name__)

AXES: tuple[str, ...] = ('x', 'y')
FUNCTIONS: tuple[str, ...] = ('exp', 'sin', 'cos', 'gaussian')
CONSTANTS: dict[str, sympy.Expr] = {'pi': sympy.pi, 'e': sympy.E}
OPERATORS: frozenset[str] = frozenset({'+', '-', '*', '/', '**', '^', '(', ')', ','})
TRANSFORMATIONS = standard_transformations + (convert_xor,)


class FieldExpression:
    """
    Closed arithmetic over the node coordinates x (and y in 2-D): numbers, + - * / ^ (or **), pi, e,
    exp, sin, cos and gaussian(center, width) / gaussian(cx, cy, width) = exp(-|x - c|^2 / (2 width^2)).
    """
    def __init__(self, text: str, dim: int) -> None:
        if dim not in (1, 2):
            raise ValueError(f'Expression dimension must be 1 or 2, but received {dim}')
        self.text: str = text
        self.dim: int = dim
        self.symbols: tuple[sympy.Symbol, ...] = tuple(sympy.Symbol(axis, real=True) for axis in AXES[:dim])
        _check_tokens(text, dim)
        self.expr: sympy.Expr = self._parse()
        self._function = sympy.lambdify(self.symbols, self.expr, 'numpy')

    def _gaussian(self, *args: sympy.Expr) -> sympy.Expr:
        if len(args) != self.dim + 1:
            raise ExpressionError(f'gaussian takes {self.dim + 1} arguments in {self.dim}-D, but received {len(args)}',
                                  self.text, self.text.find('gaussian') + 1)
        *center, width = args
        distance = sum((axis - c) ** 2 for axis, c in zip(self.symbols, center))
        return sympy.exp(-distance / (2 * width ** 2))

    def _parse(self) -> sympy.Expr:
        names = {axis.name: axis for axis in self.symbols}
        names.update(CONSTANTS)
        names.update({'exp': sympy.exp, 'sin': sympy.sin, 'cos': sympy.cos, 'gaussian': self._gaussian})
        allowed = {'Integer': sympy.Integer, 'Float': sympy.Float, 'Rational': sympy.Rational}
        try:
            expr = parse_expr(self.text, local_dict=names, global_dict=allowed, transformations=TRANSFORMATIONS)
        except ExpressionError:
            raise
        except (SyntaxError, TypeError, tokenize.TokenError) as error:
            column = getattr(error, 'offset', None)
            raise ExpressionError(f'Malformed expression: {error}', self.text, column) from error
        if not isinstance(expr, sympy.Expr):
            raise ExpressionError('Expression does not evaluate to a number', self.text)
        return expr

    @property
    def is_constant(self) -> bool:
        return not self.expr.free_symbols

    def constant_value(self) -> float:
        if not self.is_constant:
            raise ExpressionError('Expression depends on the coordinates', self.text)
        value = complex(self.expr.evalf())
        if value.imag != 0 or not np.isfinite(value.real):
            raise ExpressionError(f'Expression evaluates to {value}', self.text)
        return value.real

    def evaluate(self, grid: Grid) -> GridField:
        if grid.dim != self.dim:
            raise ExpressionError(f'Expression built for {self.dim}-D evaluated on a {grid.dim}-D grid', self.text)
        with np.errstate(all='ignore'):
            values = np.broadcast_to(np.asarray(self._function(*grid.mesh)), grid.shape)
        if np.iscomplexobj(values) or not np.all(np.isfinite(values)):
            raise ExpressionError('Expression is not finite and real on every node', self.text)
        return GridField(grid, values.astype('float64'))


def _check_tokens(text: str, dim: int) -> None:
    allowed = set(AXES[:dim]) | set(FUNCTIONS) | set(CONSTANTS)
    try:
        tokens = list(tokenize.generate_tokens(io.StringIO(text).readline))
    except (tokenize.TokenError, IndentationError) as error:
        raise ExpressionError(f'Malformed expression: {error}', text) from error
    for token in tokens:
        column = token.start[1] + 1
        if token.type == tokenize.NAME and token.string not in allowed:
            raise ExpressionError(f'Unknown name {token.string!r}', text, column)
        if token.type == tokenize.OP and token.string not in OPERATORS:
            raise ExpressionError(f'Unsupported operator {token.string!r}', text, column)
        if token.type not in (tokenize.NAME, tokenize.OP, tokenize.NUMBER, tokenize.NEWLINE, tokenize.NL,
                              tokenize.ENDMARKER):
            raise ExpressionError(f'Unsupported token {token.string!r}', text, column)


def parse_expression(value: str | float | int, dim: int) -> FieldExpression:
    if isinstance(value, bool):
        raise ExpressionError(f'Expected an expression, but received {value}')
    if isinstance(value, (int, float)):
        value = repr(float(value))
    if not isinstance(value, str) or not value.strip():
        raise ExpressionError(f'Expected a nonempty expression, but received {value!r}')
    return FieldExpression(value.strip(), dim)


def evaluate_expression(value: str | float | int, grid: Grid) -> GridField:
    return parse_expression(value, grid.dim).evaluate(grid)
