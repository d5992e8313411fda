from __future__ import annotations
from abc import ABC
from src.enums import *


class Params(ABC):
    def to_dict(self) -> dict[str, any]:
        return vars(self)


class AssemblyParams(Params):
    def __init__(self, max_dofs: int = 4096) -> None:
        self.max_dofs = max_dofs  # dense eigendecomposition cap


class SolverParams(Params):
    def __init__(self, method: KrylovMethod = KrylovMethod.AUTO, tol: float = 1e-10, max_iter: int | None = None,
                 symmetry_tol: float = 1e-10, check_coercivity: bool = False) -> None:
        self.method = method
        self.tol = tol
        self.max_iter = max_iter  # None -> 10 * DOF
        self.symmetry_tol = symmetry_tol
        self.check_coercivity = check_coercivity


class NewtonParams(Params):
    def __init__(self, tol: float = 1e-10, max_iter: int = 30, damping: float = 1.0, max_halvings: int = 30,
                 blowup: float = 1e6) -> None:
        self.tol = tol
        self.max_iter = max_iter
        self.damping = damping
        self.max_halvings = max_halvings
        self.blowup = blowup


class AdmissibilityParams(Params):
    def __init__(self, gap_on: GapCondition = GapCondition.COEFFICIENTS, integer_tol: float = 1e-12) -> None:
        self.gap_on = gap_on
        self.integer_tol = integer_tol


class ProbeParams(Params):
    def __init__(self, floor_factor: float = 1e-10) -> None:
        self.floor_factor = floor_factor


class RecoveryParams(Params):
    def __init__(self, tau: float = 1e-3, eps_schedule: tuple[float, ...] = (1e-2, 2e-2)) -> None:
        self.tau = tau
        self.eps_schedule = eps_schedule


def check_params_type(params: Params, expected: type) -> None:
    if not isinstance(params, expected):
        raise TypeError(f'Params must be of type {expected.__name__} but received {type(params).__name__}')
