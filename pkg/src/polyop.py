from __future__ import annotations
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
import numpy as np
from scipy import linalg
from src.fracop import *

LOGGER = logging.getLogger(__name__)

INTEGER_ORDER_TOL: float = 1e-12


def is_integer_order(order: float, tol: float = INTEGER_ORDER_TOL) -> bool:
    return abs(order - round(order)) <= tol


def is_natural_number(value: float, tol: float = INTEGER_ORDER_TOL) -> bool:
    """
    Membership in {1, 2, 3, ...} up to tol.
    """
    return is_integer_order(value, tol) and round(value) >= 1


class PolyTerm:
    def __init__(self, coefficient: GridField | float, backend: FractionalBackend) -> None:
        if isinstance(coefficient, GridField):
            backend.grid.check_same(coefficient.grid)
            if not coefficient.is_real:
                raise ValueError('Term coefficients must be real')
            coefficient.check_finite()
        else:
            coefficient = float(coefficient)
            if not np.isfinite(coefficient):
                raise ValueError(f'Term coefficient must be finite, but received {coefficient}')
        self.coefficient: GridField | float = coefficient
        self.backend: FractionalBackend = backend

    @property
    def order(self) -> float:
        return self.backend.sigma

    @property
    def grid(self) -> Grid:
        return self.backend.grid

    @property
    def coefficient_values(self) -> np.ndarray:
        if isinstance(self.coefficient, GridField):
            return self.coefficient.values
        return np.full(self.grid.shape, self.coefficient)

    def constant_value(self) -> float | None:
        if not isinstance(self.coefficient, GridField):
            return self.coefficient
        values = self.coefficient.values
        first = values.reshape(-1)[0]
        return float(first) if np.all(values == first) else None

    def scaled(self, factor: float) -> PolyTerm:
        return PolyTerm(self.coefficient * factor, self.backend)

    def describe(self) -> dict[str, any]:
        constant = self.constant_value()
        if constant is not None:
            coefficient = constant
        else:
            coefficient = 'sha256:' + hashlib.sha256(self.coefficient.values.tobytes()).hexdigest()
        return {'coefficient': coefficient, **self.backend.describe()}


class PolyFractionalOperator:
    """
    Sum of alpha_i(x) (-Delta_{gamma_i})^{s_i} with strictly increasing orders, kept sorted by order.
    """
    def __init__(self, terms: list[PolyTerm], role: OperatorRole = OperatorRole.FORWARD) -> None:
        if not terms:
            raise ValueError('A poly-fractional operator needs at least one term')
        terms = sorted(terms, key=lambda term: term.order)
        grid = terms[0].grid
        for term in terms[1:]:
            grid.check_same(term.grid)
        orders = [term.order for term in terms]
        if any(later <= earlier for earlier, later in zip(orders, orders[1:])):
            raise ValueError(f'Term orders must be strictly increasing, but received {orders}')
        self.terms: list[PolyTerm] = terms
        self.role: OperatorRole = role
        if role == OperatorRole.FORWARD:
            self.validate_forward()

    def validate_forward(self) -> None:
        if self.orders[0] <= 0:
            raise ValueError(f'Forward operator orders must be positive, but received {self.orders}')
        if is_integer_order(self.top_order):
            raise ValueError(f'Forward operator top order must be non-integer, but received {self.top_order}')
        for term in self.terms:
            if np.any(term.coefficient_values <= 0):
                raise ValueError(f'Forward operator coefficient of order {term.order} must be positive on all nodes')

    @property
    def grid(self) -> Grid:
        return self.terms[0].grid

    @property
    def orders(self) -> list[float]:
        return [term.order for term in self.terms]

    @property
    def top_order(self) -> float:
        return self.terms[-1].order

    def apply(self, u: GridField) -> GridField:
        return apply_poly(self, u)

    def scaled(self, factor: float) -> PolyFractionalOperator:
        return PolyFractionalOperator([term.scaled(factor) for term in self.terms], self.role)

    def without_term(self, index: int) -> PolyFractionalOperator | None:
        remaining = [term for i, term in enumerate(self.terms) if i != index]
        if not remaining:
            return None
        return PolyFractionalOperator(remaining, OperatorRole.PROBE)

    def with_role(self, role: OperatorRole) -> PolyFractionalOperator:
        return PolyFractionalOperator(self.terms, role)

    def describe(self) -> dict[str, any]:
        return {'role': self.role.value, 'terms': [term.describe() for term in self.terms]}

    def raise_probe_order_error(self, probe: PolyFractionalOperator) -> None:
        raise ValueError(f'Probe top order {probe.top_order} exceeds the forward top order {self.top_order}; '
                         'the probe orders must satisfy 0 <= s_1 < ... <= s_M')


def check_probe_pairing(P: PolyFractionalOperator, probe: PolyFractionalOperator) -> None:
    P.grid.check_same(probe.grid)
    if probe.top_order > P.top_order:
        P.raise_probe_order_error(probe)


def operator_digest(P: PolyFractionalOperator) -> str:
    return hashlib.sha256(json.dumps(P.describe(), sort_keys=True).encode('utf-8')).hexdigest()


def apply_poly(P: PolyFractionalOperator, u: GridField) -> GridField:
    P.grid.check_same(u.grid)
    u.check_finite()
    total = np.zeros(u.grid.shape, dtype=u.values.dtype)
    for term in P.terms:
        total = total + term.coefficient_values * term.backend.apply(u).values
    return GridField(u.grid, total)


class InteriorMatrix:
    def __init__(self, matrix: np.ndarray, omega: Region, is_symmetric: bool) -> None:
        matrix.setflags(write=False)
        self.matrix: np.ndarray = matrix
        self.omega: Region = omega
        self.is_symmetric: bool = is_symmetric

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def apply(self, vector: np.ndarray) -> np.ndarray:
        return self.matrix @ vector


def interior_matrix(P: PolyFractionalOperator, q: GridField | None, omega: Region,
                    symmetry_tol: float = 1e-10) -> InteriorMatrix:
    """
    Galerkin restriction of P + q to fields supported in omega: K[a, b] = (P delta_b + q delta_b)(a) for a, b in omega.
    Matrices symmetric within symmetry_tol (relative to the max-norm) are symmetrized and flagged.
    """
    P.grid.check_same(omega.grid)
    if omega.cardinality == 0:
        raise EmptyRegionError('Interior matrix needs a nonempty region')
    nodes = omega.nodes
    size = len(nodes)
    matrix = np.zeros((size, size))
    for term in P.terms:
        weights = term.coefficient_values.reshape(-1)[nodes]
        matrix += weights[:, None] * term.backend.columns(nodes)[nodes, :]
    if q is not None:
        matrix[np.diag_indices(size)] += gather(q, omega)
    scale = np.max(np.abs(matrix))
    asymmetry = np.max(np.abs(matrix - matrix.T))
    is_symmetric = bool(asymmetry <= symmetry_tol * scale)
    if is_symmetric:
        matrix = 0.5 * (matrix + matrix.T)
    LOGGER.debug('Interior matrix of size %d, asymmetry %.3g (symmetric=%s)', size, asymmetry, is_symmetric)
    return InteriorMatrix(matrix, omega, is_symmetric)


def sobolev_gram_matrix(grid: Grid, s: float, omega: Region) -> np.ndarray:
    """
    Nodal-basis Gram matrix of the discrete H^s inner product over omega (per unit cell volume).
    """
    return symbol_columns(grid, (1.0 + grid.xi_squared) ** s, omega.nodes)[omega.nodes, :]


def coercivity_probe(P: PolyFractionalOperator, q: GridField | None, omega: Region) -> float:
    """
    Smallest generalized eigenvalue of the symmetrized interior matrix against the H^{s_M} Gram matrix,
    i.e. the minimum Rayleigh quotient <(P+q)u, u> / ||u||^2_{H^{s_M}} over omega-supported fields.
    """
    matrix = interior_matrix(P, q, omega).matrix
    symmetric = 0.5 * (matrix + matrix.T)
    gram = sobolev_gram_matrix(P.grid, P.top_order, omega)
    value = linalg.eigh(symmetric, gram, eigvals_only=True, subset_by_index=[0, 0])[0]
    return float(value)


@dataclass(frozen=True)
class ProductForm:
    """
    sum_j c_j T^{n_j} + c_r T^r with integer n_j and a single non-integer r.
    """
    integer_terms: tuple[tuple[float, int], ...]
    fractional_term: tuple[float, float]

    def symbol(self, z: np.ndarray) -> np.ndarray:
        total = sum(c * z ** n for c, n in self.integer_terms) if self.integer_terms else np.zeros_like(z)
        c_r, r = self.fractional_term
        return total + c_r * z ** r

    def to_dict(self) -> dict[str, any]:
        return {'integer_terms': [list(term) for term in self.integer_terms],
                'fractional_term': list(self.fractional_term)}


@dataclass(frozen=True)
class AdmissibilityVerdict:
    status: AdmissibilityStatus
    witness: PolyFractionalOperator | None = None
    product_form: ProductForm | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def witness_is_unit(self) -> bool:
        if self.witness is None or len(self.witness.terms) != 1:
            return False
        term = self.witness.terms[0]
        return term.order == 0 and term.constant_value() == 1.0

    def to_dict(self) -> dict[str, any]:
        return {'status': self.status.value,
                'witness': None if self.witness is None else self.witness.describe()['terms'],
                'witness_is_unit': self.witness_is_unit,
                'product_form': None if self.product_form is None else self.product_form.to_dict(),
                'notes': list(self.notes)}


def unit_multiplier(grid: Grid) -> PolyFractionalOperator:
    return PolyFractionalOperator([PolyTerm(1.0, IdentityBackend(grid))], OperatorRole.MULTIPLIER)


def _reference_backend(P: PolyFractionalOperator) -> FractionalBackend | None:
    return next((term.backend for term in P.terms if not isinstance(term.backend, IdentityBackend)), None)


def proportionality_factors(P: PolyFractionalOperator) -> list[float] | None:
    """
    :return: c_i with gamma_i = c_i * gamma_ref for every term (order-0 terms get 1), or None if not proportional.
    """
    reference = _reference_backend(P)
    factors = []
    for term in P.terms:
        if isinstance(term.backend, IdentityBackend):
            factors.append(1.0)
            continue
        factor = reference.proportionality_factor(term.backend)
        if factor is None or factor <= 0:
            return None
        factors.append(factor)
    return factors


def _split_product(coefficients: list[float], orders: list[float], tol: float) -> ProductForm | None:
    integer_terms, fractional = [], []
    for c, s in zip(coefficients, orders):
        if is_integer_order(s, tol):
            integer_terms.append((float(c), int(round(s))))
        else:
            fractional.append((float(c), float(s)))
    if len(fractional) != 1:
        return None
    return ProductForm(tuple(integer_terms), fractional[0])


def _example1_witness(P: PolyFractionalOperator, constants: list[float], factors: list[float],
                      tol: float) -> tuple[PolyFractionalOperator | None, ProductForm | None, str]:
    """
    Monomial multiplier B = T^t, T the reference operator, with t the smallest shift leaving exactly one
    non-integer order in B*P.
    """
    orders = P.orders
    shifts = sorted({0.0} | {math.ceil(s) - s for s in orders if not is_integer_order(s, tol)})
    weights = [alpha * c ** s for alpha, c, s in zip(constants, factors, orders)]
    for shift in shifts:
        form = _split_product(weights, [s + shift for s in orders], tol)
        if form is None:
            continue
        if shift == 0.0:
            return unit_multiplier(P.grid), form, 'B = 1'
        reference = _reference_backend(P)
        witness = PolyFractionalOperator([PolyTerm(1.0, reference.with_order(shift))], OperatorRole.MULTIPLIER)
        return witness, form, f'B = T^{shift:.12g}'
    return None, None, 'no monomial multiplier T^t leaves exactly one fractional order'


def check_admissible(P: PolyFractionalOperator, params: AdmissibilityParams = AdmissibilityParams()
                     ) -> AdmissibilityVerdict:
    """
    Sufficient conditions only: a NOT_ESTABLISHED verdict never claims the operator is outside the admissible class.
    For two constant terms the gap test is tried before the (then vacuous) progression relation.
    Example-1 verdicts are issued only together with a multiplier witness; without one the checker moves on to
    the single-fractional-order test.
    """
    check_params_type(params, AdmissibilityParams)
    tol = params.integer_tol
    notes = []
    constants = [term.constant_value() for term in P.terms]
    all_constant = None not in constants
    factors = proportionality_factors(P)
    count = len(P.terms)
    if all_constant and factors is None:
        notes.append('anisotropies are not proportional; the multiplier argument is not available')
    if all_constant and factors is not None and count >= 2:
        status = None
        if count == 2:
            if params.gap_on == GapCondition.ORDERS:
                LOGGER.warning('Gap condition applied to the orders instead of the coefficients')
                values = P.orders
            else:
                values = constants
            gap = 2 * (values[1] - values[0])
            if not is_natural_number(gap, tol):
                status = AdmissibilityStatus.EXAMPLE1_GAP
                notes.append(f'2*({values[1]:.12g} - {values[0]:.12g}) = {gap:.12g} is not a natural number '
                             f'({params.gap_on.value.lower()})')
        if status is None and all(abs(2 * constants[i] - constants[i - 1] - constants[i + 1]) <=
                                  tol * max(1.0, abs(constants[i])) for i in range(1, count - 1)):
            status = AdmissibilityStatus.EXAMPLE1_PROGRESSION
            notes.append('coefficients form an arithmetic progression')
        if status is not None:
            witness, form, note = _example1_witness(P, constants, factors, tol)
            notes.append(note)
            if witness is not None:
                return AdmissibilityVerdict(status, witness, form, notes)
            # a posynomial multiplier cannot cancel terms, so every shift keeps the orders' common fractional part
            LOGGER.info('%s holds but no multiplier witness exists; verdict not issued', status.value)
            notes.append(f'{status.value} condition holds without a witness')
    fractional = [s for s in P.orders if not is_integer_order(s, tol)]
    integers_ok = all(round(s) >= 0 for s in P.orders if is_integer_order(s, tol))
    if len(fractional) == 1 and integers_ok:
        form = _split_product(constants, P.orders, tol) if all_constant else None
        if not all_constant:
            notes.append('variable coefficients: the product form holds with coefficient fields')
        if factors is None:
            notes.append('anisotropies differ between terms')
        return AdmissibilityVerdict(AdmissibilityStatus.EXAMPLE2, unit_multiplier(P.grid), form, notes)
    notes.append(f'{len(fractional)} non-integer orders and no applicable multiplier construction')
    return AdmissibilityVerdict(AdmissibilityStatus.NOT_ESTABLISHED, None, None, notes)


def _term_symbol(term: PolyTerm) -> np.ndarray:
    if isinstance(term.backend, IdentityBackend):
        return np.ones(term.grid.shape)
    if isinstance(term.backend, FourierSymbolBackend):
        return term.backend.symbol
    raise ValueError(f'Symbol-level check needs Fourier-symbol backends, but received {term.backend.backend_type}')


def multiplier_identity_residual(P: PolyFractionalOperator, verdict: AdmissibilityVerdict) -> float:
    """
    Max relative deviation between B_hat * P_hat and the product form on the nonzero lattice symbols z = xi^T gamma xi.
    """
    if verdict.witness is None or verdict.product_form is None:
        raise ValueError(f'Verdict {verdict.status.value} carries no witness product form to verify')
    constants = [term.constant_value() for term in P.terms]
    if None in constants:
        raise ValueError('Symbol-level check needs constant coefficients')
    reference = _reference_backend(P)
    if not isinstance(reference, FourierSymbolBackend):
        raise ValueError('Symbol-level check needs a Fourier-symbol reference term')
    z = reference.base_symbol
    nonzero = z > 0
    operator_symbol = sum(c * _term_symbol(term) for c, term in zip(constants, P.terms))
    multiplier_symbol = sum(term.constant_value() * _term_symbol(term) for term in verdict.witness.terms)
    product = (multiplier_symbol * operator_symbol)[nonzero]
    expected = verdict.product_form.symbol(z[nonzero])
    return float(np.max(np.abs(product - expected) / np.abs(expected)))
