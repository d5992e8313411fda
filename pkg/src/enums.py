from enum import Enum


class BoundaryType(str, Enum):
    PERIODIC: str = 'PERIODIC'
    DIRICHLET: str = 'DIRICHLET'


class RegionKind(str, Enum):
    FULL: str = 'FULL'
    OMEGA: str = 'OMEGA'
    OMEGA_COMPLEMENT: str = 'OMEGA_COMPLEMENT'
    WINDOW: str = 'WINDOW'
    EFFECTIVE: str = 'EFFECTIVE'


class RegionShape(str, Enum):
    BOX: str = 'BOX'
    BALL: str = 'BALL'


class BackendType(str, Enum):
    FOURIER_SYMBOL: str = 'FOURIER_SYMBOL'
    MATRIX_FUNCTION: str = 'MATRIX_FUNCTION'
    IDENTITY: str = 'IDENTITY'


class OperatorRole(str, Enum):
    FORWARD: str = 'FORWARD'
    PROBE: str = 'PROBE'
    MULTIPLIER: str = 'MULTIPLIER'


class AdmissibilityStatus(str, Enum):
    EXAMPLE1_PROGRESSION: str = 'ADMISSIBLE_EXAMPLE1_PROGRESSION'
    EXAMPLE1_GAP: str = 'ADMISSIBLE_EXAMPLE1_GAP'
    EXAMPLE2: str = 'ADMISSIBLE_EXAMPLE2'
    NOT_ESTABLISHED: str = 'NOT_ESTABLISHED'


class GapCondition(str, Enum):  # what the two-term gap test of the first example inspects
    COEFFICIENTS: str = 'COEFFICIENTS'
    ORDERS: str = 'ORDERS'


class KrylovMethod(str, Enum):
    AUTO: str = 'AUTO'
    CG: str = 'CG'
    GMRES: str = 'GMRES'
    DIRECT: str = 'DIRECT'


class ProbeContext(str, Enum):
    INTERIOR_GAP: str = 'INTERIOR_GAP'
    SYMBOL_POSITIVITY: str = 'SYMBOL_POSITIVITY'
    EXTERIOR_EXTENSION: str = 'EXTERIOR_EXTENSION'


class ProbeVerdict(str, Enum):
    NONDEGENERATE: str = 'NONDEGENERATE'
    DEGENERATE: str = 'DEGENERATE'


class Task(str, Enum):
    FORWARD: str = 'FORWARD'
    DTN: str = 'DTN'
    RECOVER_Q: str = 'RECOVER_Q'
    RECOVER_ALPHA: str = 'RECOVER_ALPHA'
    RECOVER_TAYLOR: str = 'RECOVER_TAYLOR'
    UCP_SUITE: str = 'UCP_SUITE'
    ADMISSIBILITY: str = 'ADMISSIBILITY'
