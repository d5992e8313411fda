from __future__ import annotations
import logging
import math
from dataclasses import dataclass
from typing import Callable
import numpy as np
from src.solver import *
from src.utils import partial_bell

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class EffectiveSet:
    """
    Nodes of omega where |generator| > threshold * max_omega |generator|.
    """
    region: Region
    threshold: float
    generator: str

    @property
    def cardinality(self) -> int:
        return self.region.cardinality

    def to_dict(self) -> dict[str, any]:
        return {'threshold': self.threshold, 'generator': self.generator, 'cardinality': self.cardinality}


def effective_set(values: GridField, omega: Region, tau: float, generator: str) -> EffectiveSet:
    if not 0 < tau < 1:
        raise ValueError(f'Effective-set threshold must lie in (0, 1), but received {tau}')
    magnitude = np.abs(restrict_field(values, omega).values)
    peak = float(np.max(magnitude))
    if peak == 0 or not np.isfinite(peak):
        raise EmptyEffectiveSetError(f'{generator} vanishes on the interior region; no node to recover from')
    mask = (magnitude > tau * peak) & omega.mask
    return EffectiveSet(effective_region(omega, mask), float(tau), generator)


@dataclass(frozen=True)
class RecoveryReport:
    estimate: GridField
    effective: EffectiveSet
    rel_error_on_E: float | None
    coverage: float

    def to_dict(self) -> dict[str, any]:
        return {'tau': self.effective.threshold, 'coverage': self.coverage, 'rel_error_on_E': self.rel_error_on_E,
                'effective': self.effective.to_dict()}


def _relative_error(estimate: GridField, truth: GridField, mask: np.ndarray) -> float:
    """
    l2 error over the mask relative to the truth there; max-abs error when the truth vanishes on the mask.
    """
    difference = estimate.values[mask] - truth.values[mask]
    reference = np.linalg.norm(truth.values[mask])
    if reference == 0:
        return float(np.max(np.abs(difference)))
    return float(np.linalg.norm(difference) / reference)


def _report(numerator: GridField, denominator: GridField, effective: EffectiveSet, omega: Region,
            truth: GridField | None) -> RecoveryReport:
    mask = effective.region.mask
    estimate = np.full(numerator.grid.shape, np.nan)
    estimate[mask] = -numerator.values[mask] / denominator.values[mask]
    estimate = GridField(numerator.grid, estimate)
    error = None if truth is None else _relative_error(estimate, truth, mask)
    coverage = effective.cardinality / omega.cardinality
    LOGGER.info('Recovered on %d nodes (coverage %.3f), relative error %s', effective.cardinality, coverage,
                'n/a' if error is None else f'{error:.3e}')
    return RecoveryReport(estimate, effective, error, coverage)


def recover_q(P: PolyFractionalOperator, u: GridField, omega: Region, tau: float = 1e-3,
              truth: GridField | None = None) -> RecoveryReport:
    """
    q_hat = -(P u) / u on E = {x in omega : |u(x)| > tau * max_omega |u|}. For r = P u + q u the estimate is
    q - r/u, exact where the equation holds.
    """
    P.grid.check_same(u.grid)
    if not u.is_real:
        raise ValueError('Potential recovery needs a real solution field')
    effective = effective_set(u, omega, tau, 'u')
    return _report(apply_poly(P, u), u, effective, omega, truth)


def recover_alpha(other_terms: PolyFractionalOperator | None, q: GridField | None, u: GridField,
                  m_backend: FractionalBackend, omega: Region, tau: float = 1e-3,
                  truth: GridField | None = None) -> RecoveryReport:
    """
    alpha_hat_m = -(P_other u + q u) / w with w = (-Delta_{gamma_m})^{s_m} u, on E' = {|w| > tau * max_omega |w|}.
    """
    m_backend.check_field(u)
    w = m_backend.apply(u)
    effective = effective_set(w, omega, tau, 'fractional power of u')
    numerator = GridField.zeros(u.grid) if other_terms is None else apply_poly(other_terms, u)
    if q is not None:
        numerator = numerator + restrict_field(q, omega) * u
    return _report(numerator, w, effective, omega, truth)


def finite_difference_weights(nodes: list[float], order: int) -> np.ndarray:
    """
    Weights w with sum_j w_j p(nodes_j) = p^(order)(0) for every polynomial p of degree < len(nodes).
    On a symmetric stencil this matches Richardson extrapolation of nested central differences.
    """
    nodes = np.asarray(nodes, dtype='float64')
    if order < 0 or len(nodes) <= order:
        raise StencilError(f'{len(nodes)} stencil nodes cannot resolve a derivative of order {order}')
    scale = float(np.max(np.abs(nodes)))
    if scale == 0:
        raise StencilError('Stencil needs at least one nonzero node')
    scaled = nodes / scale
    powers = np.arange(len(nodes))
    vandermonde = scaled[None, :] ** powers[:, None]
    rhs = np.zeros(len(nodes))
    rhs[order] = math.factorial(order)
    return np.linalg.solve(vandermonde, rhs) / scale ** order


def linearize(solutions: list[tuple[float, GridField]], order: int) -> GridField:
    """
    Estimate of d^order u_eps / d eps^order at eps = 0 from solutions on a symmetric eps-stencil. The eps = 0
    solution u = 0 is added when absent.
    """
    if order < 1:
        raise StencilError(f'Linearization order must be at least 1, but received {order}')
    if not solutions:
        raise StencilError('Linearization needs at least one (eps, u_eps) pair')
    grid = solutions[0][1].grid
    for _, u in solutions:
        grid.check_same(u.grid)
    stencil = {float(eps): u for eps, u in solutions}
    if len(stencil) != len(solutions):
        raise StencilError(f'Duplicate eps values in {[eps for eps, _ in solutions]}')
    stencil.setdefault(0.0, GridField.zeros(grid))
    missing = [eps for eps in stencil if -eps not in stencil]
    if missing:
        raise StencilError(f'Stencil is not symmetric about 0: missing the mirrors of {missing}')
    nodes = sorted(stencil)
    weights = finite_difference_weights(nodes, order)
    total = np.zeros(grid.shape)
    for weight, eps in zip(weights, nodes):
        total = total + weight * stencil[eps].values
    return GridField(grid, total)


def recover_taylor_from_derivatives(P: PolyFractionalOperator, derivatives: list[GridField], omega: Region,
                                    tau: float = 1e-3, truth: list[GridField] | None = None
                                    ) -> list[RecoveryReport]:
    """
    Induction over l = 1..L on the derivative fields u^(l) = d^l u_eps / d eps^l at eps = 0:
    F_hat^(l) = -(P u^(l) + sum_{k<l} F_hat^(k) B_{l,k}(u^(1), ...)) / (u^(1))^l
    on the effective set of (u^(1))^l.
    :return: Reports for l = 1..L.
    """
    if not derivatives:
        raise ValueError('Taylor recovery needs at least the first derivative field')
    values = [d.values for d in derivatives]
    first = derivatives[0]
    reports = []
    for ell in range(1, len(derivatives) + 1):
        numerator = apply_poly(P, derivatives[ell - 1]).values
        for k, previous in enumerate(reports, start=1):
            recovered = np.where(previous.effective.region.mask, previous.estimate.values, 0.0)
            numerator = numerator + recovered * partial_bell(ell, k, values)
        denominator = first ** ell
        effective = effective_set(denominator, omega, tau, f'u^(1) to the power {ell}')
        coefficient_truth = None if truth is None else truth[ell]
        reports.append(_report(GridField(first.grid, numerator), denominator, effective, omega, coefficient_truth))
    return reports


def recover_taylor(P: PolyFractionalOperator, f1: GridField, L: int, omega: Region,
                   eps_schedule: tuple[float, ...], tau: float, forward_model: Callable[[GridField], GridField],
                   truth: list[GridField] | None = None) -> list[RecoveryReport]:
    """
    Higher-order linearization: measure u_eps for eps = +-eps_schedule, estimate u^(1..L) by finite differences,
    recover F^(1..L) inductively, then F^(0) from the eps = 1 solution.
    :param forward_model: Measurement emulator f -> u_f of the semilinear exterior problem.
    :return: Reports for l = 0..L.
    """
    if L < 0:
        raise ValueError(f'Taylor order must be nonnegative, but received {L}')
    if truth is not None and len(truth) != L + 1:
        raise ValueError(f'Ground truth needs {L + 1} coefficient fields, but received {len(truth)}')
    derivative_reports = []
    if L >= 1:
        if not eps_schedule or min(eps_schedule) <= 0:
            raise StencilError(f'The eps schedule must hold positive values, but received {eps_schedule}')
        solutions = []
        for eps in sorted(eps_schedule):
            for signed in (-eps, eps):
                solutions.append((signed, forward_model(f1 * signed)))
        derivatives = [linearize(solutions, ell) for ell in range(1, L + 1)]
        derivative_reports = recover_taylor_from_derivatives(P, derivatives, omega, tau, truth)
    u = forward_model(f1)
    source = apply_poly(P, u).values
    mask = omega.mask.copy()
    for ell, report in enumerate(derivative_reports, start=1):
        mask &= report.effective.region.mask
        source = source + np.where(mask, report.estimate.values, 0.0) * u.values ** ell / math.factorial(ell)
    if not mask.any():
        raise EmptyEffectiveSetError('No interior node is shared by the effective sets of all recovered orders')
    effective = EffectiveSet(effective_region(omega, mask), float(tau), 'intersection of the higher-order sets')
    constant_truth = None if truth is None else truth[0]
    constant = _report(GridField(u.grid, source), GridField.constant(u.grid, 1.0), effective, omega, constant_truth)
    return [constant] + derivative_reports
