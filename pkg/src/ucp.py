from __future__ import annotations
import logging
from dataclasses import dataclass, field
import numpy as np
from scipy import linalg
from src.polyop import *

LOGGER = logging.getLogger(__name__)


class ExteriorEllipticOperator:
    """
    Scalar second-order operator -div(a grad) read on the exterior nodes of omega.
    """
    def __init__(self, a: GridField, omega: Region, boundary: BoundaryType = BoundaryType.PERIODIC) -> None:
        a.grid.check_same(omega.grid)
        if not a.is_real:
            raise ValueError('Exterior coefficient must be real')
        exterior = complement_region(omega)
        a_min = float(np.min(gather(a, exterior)))
        if a_min <= 0:
            self.raise_positivity_error(a_min)
        self.a: GridField = a
        self.omega: Region = omega
        self.exterior: Region = exterior
        self.boundary: BoundaryType = boundary
        self.a_min: float = a_min

    def raise_positivity_error(self, a_min: float) -> None:
        raise EllipticityError(f'Exterior coefficient must be positive on every exterior node, minimum is {a_min}')

    def assemble(self, params: AssemblyParams = AssemblyParams()) -> SelfAdjointOperator:
        # values inside omega only enter face averages next to the interface
        filled = GridField(self.a.grid, np.where(self.omega.mask, self.a_min, self.a.values))
        return assemble_elliptic(self.a.grid, AnisotropyField.scalar(self.a.grid, filled), self.boundary, params)

    def describe(self) -> dict[str, any]:
        return {'boundary': self.boundary.value, 'a_min': self.a_min}


@dataclass(frozen=True)
class UcpProbeReport:
    context: ProbeContext
    min_singular_value: float
    verdict: ProbeVerdict
    floor: float
    descriptors: dict[str, any] = field(default_factory=dict)
    seed: int | None = None

    @property
    def nondegenerate(self) -> bool:
        return self.verdict == ProbeVerdict.NONDEGENERATE

    def to_dict(self) -> dict[str, any]:
        return {'context': self.context.value, 'min_singular_value': self.min_singular_value,
                'verdict': self.verdict.value, 'floor': self.floor, 'seed': self.seed, **self.descriptors}


def _verdict(value: float, floor: float) -> ProbeVerdict:
    return ProbeVerdict.NONDEGENERATE if value > floor else ProbeVerdict.DEGENERATE


def _matrix_report(context: ProbeContext, matrix: np.ndarray, params: ProbeParams,
                   descriptors: dict[str, any]) -> UcpProbeReport:
    check_params_type(params, ProbeParams)
    smallest = float(np.min(linalg.svdvals(matrix)))
    floor = params.floor_factor * float(np.max(np.abs(matrix)))
    report = UcpProbeReport(context, smallest, _verdict(smallest, floor), floor, descriptors)
    LOGGER.info('%s: smallest singular value %.3e against floor %.3e (%s)', context.value, smallest, floor,
                report.verdict.value)
    return report


def interior_gap(probe: PolyFractionalOperator, omega: Region, params: ProbeParams = ProbeParams()) -> UcpProbeReport:
    """
    Smallest singular value of the interior matrix of the probe over omega-supported fields. A positive gap
    means zero is the only lattice field with probe u = 0 in omega and u = 0 outside.
    """
    matrix = interior_matrix(probe, None, omega).matrix
    descriptors = {'grid': probe.grid.describe(), 'operator_digest': operator_digest(probe),
                   'dofs': omega.cardinality}
    return _matrix_report(ProbeContext.INTERIOR_GAP, matrix, params, descriptors)


def _isotropic_symbol(term: PolyTerm) -> np.ndarray:
    if isinstance(term.backend, IdentityBackend):
        return np.ones(term.grid.shape)
    if not isinstance(term.backend, FourierSymbolBackend) or term.backend.gamma.isotropic_factor() is None:
        raise ValueError(f'Symbol positivity needs isotropic Fourier-symbol terms, but the term of order '
                         f'{term.order} is {term.backend.describe()}')
    return term.backend.symbol


def symbol_positivity(probe: PolyFractionalOperator, params: ProbeParams = ProbeParams()) -> UcpProbeReport:
    """
    Minimum of sum_i alpha_i (gamma_i |xi|^2)^{s_i} over the nonzero lattice frequencies. Only meaningful for
    constant positive coefficients and scalar anisotropies.
    """
    check_params_type(params, ProbeParams)
    total = np.zeros(probe.grid.shape)
    for term in probe.terms:
        alpha = term.constant_value()
        if alpha is None:
            raise ValueError('Symbol positivity does not apply to variable coefficients')
        if alpha <= 0:
            raise ValueError(f'Symbol positivity needs positive coefficients, but received {alpha}')
        total = total + alpha * _isotropic_symbol(term)
    values = total[probe.grid.xi_squared > 0]
    smallest = float(np.min(values))
    floor = params.floor_factor * float(np.max(values))
    descriptors = {'grid': probe.grid.describe(), 'operator_digest': operator_digest(probe)}
    return UcpProbeReport(ProbeContext.SYMBOL_POSITIVITY, smallest, _verdict(smallest, floor), floor, descriptors)


def exterior_extension_gap(operator: ExteriorEllipticOperator, window: Region, omega: Region,
                           params: ProbeParams = ProbeParams(), assembly: AssemblyParams = AssemblyParams()
                           ) -> UcpProbeReport:
    """
    Smallest singular value of the exterior operator on the free nodes F = exterior minus window, after
    eliminating the window nodes pinned to zero.

    Over the exterior unknowns ordered (F, W) the pinned system {L on F, identity rows on W} is block upper
    triangular [[L_FF, L_FW], [0, I]], so it is singular exactly when L_FF is. The reported value is
    sigma_min(L_FF), which cannot grow when the window shrinks; sigma_min of the stacked system is kept in the
    descriptors as `stacked_min_singular_value`.
    """
    omega.grid.check_same(window.grid)
    if window.cardinality == 0:
        raise EmptyRegionError('The window must contain at least one node')
    if np.any(window.mask & omega.mask):
        raise ValueError('The window must lie in the exterior of the interior region')
    free = np.flatnonzero(~omega.mask & ~window.mask)
    if len(free) == 0:
        raise EmptyRegionError('The window covers the whole exterior; no free node is left')
    full = operator.assemble(assembly).matrix
    matrix = full[np.ix_(free, free)]
    pinned = window.nodes
    stacked = np.vstack([full[np.ix_(free, np.concatenate([free, pinned]))],
                         np.hstack([np.zeros((len(pinned), len(free))), np.eye(len(pinned))])])
    descriptors = {'grid': omega.grid.describe(), 'window_nodes': window.cardinality, 'free_nodes': len(free),
                   'stacked_min_singular_value': float(np.min(linalg.svdvals(stacked))), **operator.describe()}
    return _matrix_report(ProbeContext.EXTERIOR_EXTENSION, matrix, params, descriptors)


def _sample_ratios(omega: Region, numerator_order: float, denominator_order: float, samples: int,
                   seed: int) -> np.ndarray:
    """
    Ratios ||(-Delta)^{r/2} u|| / ||(-Delta)^{s/2} u|| over standard normal nodal fields on omega, one draw of
    |omega| values per sample in order.
    """
    if samples < 1:
        raise ValueError(f'Probe needs at least one sample, but received {samples}')
    generator = np.random.default_rng(seed)
    ratios = np.empty(samples)
    for i in range(samples):
        u = scatter(generator.standard_normal(omega.cardinality), omega)
        ratios[i] = homogeneous_norm(u, numerator_order) / homogeneous_norm(u, denominator_order)
    return ratios


def poincare_probe(sigma: float, omega: Region, samples: int, seed: int) -> float:
    """
    Sampled estimate of the constant C in ||u|| <= C ||(-Delta)^{sigma/2} u|| for omega-supported u.
    """
    if not sigma > 0:
        raise ValueError(f'Poincare probe needs sigma > 0, but received {sigma}')
    if is_integer_order(sigma):
        LOGGER.warning('Poincare probe at integer order %s', sigma)
    return float(np.max(_sample_ratios(omega, 0.0, sigma, samples, seed)))


def poincare_history(sigma: float, omega: Region, samples: int, seed: int) -> np.ndarray:
    """
    Running maximum of the Poincare ratios, nondecreasing in the sample count.
    """
    return np.maximum.accumulate(_sample_ratios(omega, 0.0, sigma, samples, seed))


def sobolev_probe(r: float, s: float, omega: Region, samples: int, seed: int) -> float:
    """
    Sampled estimate of the constant C in ||(-Delta)^{r/2} u|| <= C ||(-Delta)^{s/2} u|| for omega-supported u.
    """
    if r < 0 or r > s:
        raise ValueError(f'Sobolev probe needs 0 <= r <= s, but received r = {r}, s = {s}')
    if r == s:
        return 1.0
    return float(np.max(_sample_ratios(omega, r, s, samples, seed)))
