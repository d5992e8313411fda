from __future__ import annotations
import logging
import math
from dataclasses import dataclass
import numpy as np
import scipy.sparse.linalg as sla
from scipy import linalg
from src.polyop import *
from src.utils import partial_bell

LOGGER = logging.getLogger(__name__)


class LinearProblem:
    """
    P u + q u = F_rhs in omega, u = f outside omega. Only the exterior values of f and the interior values of
    q and F_rhs are read.
    """
    def __init__(self, P: PolyFractionalOperator, q: GridField | None, f: GridField, omega: Region,
                 F_rhs: GridField | None = None) -> None:
        grid = P.grid
        for item in (f, omega) + tuple(x for x in (q, F_rhs) if x is not None):
            grid.check_same(item.grid)
        f.check_finite()
        self.P: PolyFractionalOperator = P
        self.omega: Region = omega
        self.exterior: Region = complement_region(omega)
        self.q: GridField = restrict_field(q, omega) if q is not None else GridField.zeros(grid)
        self.f: GridField = f
        self.F_rhs: GridField = restrict_field(F_rhs, omega) if F_rhs is not None else GridField.zeros(grid)


@dataclass(frozen=True)
class BoundReport:
    """
    Both sides of the energy estimate: sum_i ||u||_{H^{s_i}} against sum_i of H^{-s_i} norms of the data.
    """
    solution_norm: float
    data_norm: float
    ratio: float

    def to_dict(self) -> dict[str, float]:
        return {'solution_norm': self.solution_norm, 'data_norm': self.data_norm, 'ratio': self.ratio}


@dataclass(frozen=True)
class Solution:
    u: GridField
    residual_interior: float
    iterations: int
    solver_tag: KrylovMethod
    bound_report: BoundReport | None = None
    residual_history: tuple[float, ...] = ()
    outside_verified_assumptions: bool = False

    def to_dict(self) -> dict[str, any]:
        return {'residual_interior': self.residual_interior,
                'iterations': self.iterations,
                'solver_tag': self.solver_tag.value.lower(),
                'bound_report': None if self.bound_report is None else self.bound_report.to_dict(),
                'residual_history': list(self.residual_history),
                'outside_verified_assumptions': self.outside_verified_assumptions}


def bound_report(P: PolyFractionalOperator, u: GridField, F_rhs: GridField, f: GridField,
                 omega: Region) -> BoundReport:
    interior_data = restrict_field(F_rhs, omega)
    exterior_data = restrict_field(f, complement_region(omega))
    solution_norm = sum(sobolev_norm(u, s) for s in P.orders)
    data_norm = sum(sobolev_norm(interior_data, -s) + sobolev_norm(exterior_data, -s) for s in P.orders)
    if data_norm > 0:
        ratio = solution_norm / data_norm
    else:
        ratio = 0.0 if solution_norm == 0 else math.inf
    return BoundReport(float(solution_norm), float(data_norm), float(ratio))


def solve_interior_system(matrix: np.ndarray, rhs: np.ndarray, params: SolverParams,
                          symmetric: bool) -> tuple[np.ndarray, int, KrylovMethod]:
    """
    Conjugate gradients for symmetric systems, GMRES otherwise, or a dense direct solve on request.
    :return: Tuple of (solution, iteration count, method used).
    """
    check_params_type(params, SolverParams)
    size = len(rhs)
    max_iter = params.max_iter or 10 * size
    method = params.method
    if method == KrylovMethod.AUTO:
        method = KrylovMethod.CG if symmetric else KrylovMethod.GMRES
    if method == KrylovMethod.CG and not symmetric:
        LOGGER.warning('Conjugate gradients requested for a nonsymmetric interior matrix')
    if not np.any(rhs):
        return np.zeros(size), 0, method
    if method == KrylovMethod.DIRECT:
        try:
            solution = linalg.solve(matrix, rhs, assume_a='sym' if symmetric else 'gen')
        except linalg.LinAlgError as error:
            raise SingularSystemError(f'Interior matrix is singular (0 is an eigenvalue): {error}') from error
        if not np.all(np.isfinite(solution)):
            raise SingularSystemError('Direct solve produced non-finite values; the interior matrix is singular')
        return solution, 1, method
    iterations = [0]

    def count(_: np.ndarray) -> None:
        iterations[0] += 1

    if method == KrylovMethod.CG:
        solution, info = sla.cg(matrix, rhs, rtol=params.tol, atol=0.0, maxiter=max_iter, callback=count)
    elif method == KrylovMethod.GMRES:
        restart = min(size, max_iter)
        solution, info = sla.gmres(matrix, rhs, rtol=params.tol, atol=0.0, restart=restart,
                                   maxiter=math.ceil(max_iter / restart), callback=count, callback_type='pr_norm')
    else:
        raise ValueError(f'Unsupported solver method {method}')
    if info != 0 or not np.all(np.isfinite(solution)):
        residual = float(np.linalg.norm(matrix @ solution - rhs) / np.linalg.norm(rhs))
        if info < 0:
            raise SingularSystemError(f'{method.value} broke down; the interior matrix may be singular')
        raise ConvergenceError(f'{method.value} did not converge in {max_iter} iterations '
                               f'(relative residual {residual:.3g})', residual, iterations[0])
    LOGGER.debug('%s converged in %d iterations', method.value, iterations[0])
    return solution, iterations[0], method


def _residual_threshold(matrix: np.ndarray, solution: np.ndarray, rhs: np.ndarray, tol: float) -> float:
    if not len(rhs):
        return 0.0
    # rounding floor of a backward-stable solve
    floor = np.finfo(float).eps * len(rhs) * float(np.linalg.norm(matrix, np.inf)) * float(np.max(np.abs(solution)))
    return max(tol * max(1.0, float(np.linalg.norm(rhs))), floor)


def solve_linear(prob: LinearProblem, params: SolverParams = SolverParams()) -> Solution:
    """
    Split u = u0 + e with e the exterior data extended by zero and solve K u0 = (F_rhs - P e - q e) on omega.
    """
    check_params_type(params, SolverParams)
    P, omega = prob.P, prob.omega
    lifted = restrict_field(prob.f, prob.exterior)
    rhs = gather(prob.F_rhs - apply_poly(P, lifted) - prob.q * lifted, omega)
    matrix = interior_matrix(P, prob.q, omega, params.symmetry_tol)
    outside = not matrix.is_symmetric
    if outside:
        LOGGER.info('Nonsymmetric interior matrix: run is outside verified assumptions')
    if params.check_coercivity:
        probe = coercivity_probe(P, prob.q, omega)
        if probe <= 0:
            LOGGER.warning('Coercivity probe %.3g <= 0: run is outside verified assumptions', probe)
            outside = True
    interior, iterations, method = solve_interior_system(matrix.matrix, rhs, params, matrix.is_symmetric)
    residual = float(np.max(np.abs(matrix.apply(interior) - rhs))) if len(rhs) else 0.0
    if residual > _residual_threshold(matrix.matrix, interior, rhs, params.tol):
        raise ConvergenceError(f'Interior residual {residual:.3g} above tolerance {params.tol:.3g} after '
                               f'{method.value}', residual, iterations)
    u = GridField(P.grid, np.where(omega.mask, scatter(interior, omega).values, prob.f.values))
    report = bound_report(P, u, prob.F_rhs, prob.f, omega)
    return Solution(u, residual, iterations, method, report, outside_verified_assumptions=outside)


class TaylorSource:
    """
    F(x, u) = sum_l F^(l)(x) u^l / l! given by its Taylor coefficient fields F^(0..L).
    """
    def __init__(self, coefficients: list[GridField]) -> None:
        if not coefficients:
            raise ValueError('Taylor source needs at least the coefficient F^(0)')
        grid = coefficients[0].grid
        for coefficient in coefficients:
            grid.check_same(coefficient.grid)
            coefficient.check_finite()
            if not coefficient.is_real:
                raise ValueError('Taylor coefficients must be real')
        self.coefficients: list[GridField] = list(coefficients)

    @property
    def order(self) -> int:
        return len(self.coefficients) - 1

    @property
    def grid(self) -> Grid:
        return self.coefficients[0].grid

    def coefficient(self, ell: int) -> GridField:
        if ell <= self.order:
            return self.coefficients[ell]
        return GridField.zeros(self.grid)

    @staticmethod
    def check_magnitude(u: GridField, limit: float) -> None:
        if u.max_abs() > limit:
            raise ValueError(f'|u| = {u.max_abs():.3g} exceeds the semilinear evaluation limit {limit:.3g}')

    def evaluate(self, u: GridField, limit: float = math.inf) -> GridField:
        self.check_magnitude(u, limit)
        total = np.zeros(u.grid.shape)
        for ell, coefficient in enumerate(self.coefficients):
            total = total + coefficient.values * u.values ** ell / math.factorial(ell)
        return GridField(u.grid, total)

    def derivative(self, u: GridField, limit: float = math.inf) -> GridField:
        self.check_magnitude(u, limit)
        total = np.zeros(u.grid.shape)
        for ell, coefficient in enumerate(self.coefficients[1:], start=1):
            total = total + coefficient.values * u.values ** (ell - 1) / math.factorial(ell - 1)
        return GridField(u.grid, total)


class SemilinearProblem:
    def __init__(self, P: PolyFractionalOperator, source: TaylorSource, f: GridField, omega: Region,
                 newton: NewtonParams = NewtonParams()) -> None:
        check_params_type(newton, NewtonParams)
        if source.order < 1:
            raise ValueError(f'Semilinear source needs order L >= 1, but received {source.order}')
        for item in (source, f, omega):
            P.grid.check_same(item.grid)
        f.check_finite()
        self.P: PolyFractionalOperator = P
        self.source: TaylorSource = source
        self.f: GridField = f
        self.omega: Region = omega
        self.exterior: Region = complement_region(omega)
        self.newton: NewtonParams = newton


def solve_semilinear(prob: SemilinearProblem, params: SolverParams = SolverParams()) -> Solution:
    """
    Damped Newton iteration for P u + F(x, u) = 0 in omega, u = f outside, starting from the exterior data.
    Each step solves (K_P + diag(dF/du(u))) delta = residual on omega; the step is halved until the interior
    residual max-norm decreases.
    """
    P, omega, source, newton = prob.P, prob.omega, prob.source, prob.newton
    mask = omega.mask
    stiffness = interior_matrix(P, None, omega, params.symmetry_tol)

    def residual(u: GridField) -> np.ndarray:
        return gather(apply_poly(P, u) + source.evaluate(u, newton.blowup), omega)

    u = GridField(P.grid, np.where(mask, 0.0, prob.f.values))
    try:
        current = residual(u)
    except ValueError as error:
        raise NewtonDivergenceError(f'Initial iterate out of range: {error}', []) from error
    norm = float(np.max(np.abs(current)))
    history = []
    method = params.method
    for iteration in range(newton.max_iter + 1):
        history.append(norm)
        LOGGER.debug('Newton iteration %d: residual %.3e', iteration, norm)
        if norm <= newton.tol:
            return Solution(u, norm, iteration, method, residual_history=tuple(history))
        if iteration == newton.max_iter:
            break
        jacobian = stiffness.matrix + np.diag(gather(source.derivative(u, newton.blowup), omega))
        try:
            delta, _, method = solve_interior_system(jacobian, current, params, stiffness.is_symmetric)
        except (SingularSystemError, ConvergenceError) as error:
            raise NewtonDivergenceError(f'Newton step failed: {error}', history) from error
        step = newton.damping
        for _ in range(newton.max_halvings + 1):
            trial = GridField(P.grid, np.where(mask, u.values - step * scatter(delta, omega).values, u.values))
            try:
                trial_residual = residual(trial)
            except ValueError as error:
                raise NewtonDivergenceError(f'Newton iterate blew up: {error}', history) from error
            trial_norm = float(np.max(np.abs(trial_residual)))
            if trial_norm < norm:
                break
            step /= 2
        else:
            raise NewtonDivergenceError(f'Line search failed after {newton.max_halvings} halvings', history)
        u, current, norm = trial, trial_residual, trial_norm
    raise NewtonDivergenceError(f'Newton did not reach {newton.tol:.3g} in {newton.max_iter} iterations', history)


def solve_linearization(P: PolyFractionalOperator, source: TaylorSource, f1: GridField, omega: Region,
                        order: int, params: SolverParams = SolverParams()) -> list[GridField]:
    """
    Direct solves of the linearized problems
    (P + F^(1)) u^(l) = -sum_{k=2}^{l} F^(k) B_{l,k}(u^(1), ..., u^(l-k+1)) in omega,
    with exterior data f1 for l = 1 and zero otherwise.
    :return: [u^(1), ..., u^(order)].
    """
    potential = source.coefficient(1)
    zeros = GridField.zeros(P.grid)
    derivatives = []
    for ell in range(1, order + 1):
        if ell == 1:
            rhs, exterior = zeros, f1
        else:
            values = [d.values for d in derivatives]
            total = np.zeros(P.grid.shape)
            for k in range(2, ell + 1):
                total = total + source.coefficient(k).values * partial_bell(ell, k, values)
            rhs, exterior = GridField(P.grid, -total), zeros
        solution = solve_linear(LinearProblem(P, potential, exterior, omega, rhs), params)
        derivatives.append(solution.u)
    return derivatives


def dtn_apply(P: PolyFractionalOperator, q: GridField | None, probe: PolyFractionalOperator, f: GridField,
              omega: Region, params: SolverParams = SolverParams()) -> GridField:
    """
    Probe reading of the solution: restrict(probe u_f, omega).
    """
    check_probe_pairing(P, probe)
    solution = solve_linear(LinearProblem(P, q, f, omega), params)
    return restrict_field(apply_poly(probe, solution.u), omega)


def dtn_pairing(P: PolyFractionalOperator, q: GridField | None, f: GridField, g: GridField, omega: Region,
                params: SolverParams = SolverParams()) -> float:
    """
    <M f, g> = sum_i <alpha_i (-Delta_i)^{s_i} u_f, g> + (q u_f, g)_omega.
    """
    problem = LinearProblem(P, q, f, omega)
    solution = solve_linear(problem, params)
    return (apply_poly(P, solution.u) + problem.q * solution.u).inner(g)
