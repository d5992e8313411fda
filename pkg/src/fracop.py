from __future__ import annotations
import itertools
import logging
from abc import ABC, abstractmethod
import numpy as np
import scipy.sparse as sp
from scipy import linalg
from src.lattice import *
from src.params import *

LOGGER = logging.getLogger(__name__)

MATRIX_SYMMETRY_TOL: float = 1e-14
OPERATOR_SYMMETRY_TOL: float = 1e-12
ZERO_EIGENVALUE_TOL: float = 1e-12
NEGATIVE_EIGENVALUE_TOL: float = 1e-10
PROPORTIONALITY_TOL: float = 1e-14


class AnisotropyMatrix:
    def __init__(self, matrix: np.ndarray | float, ellipticity: float | None = None) -> None:
        matrix = np.atleast_2d(np.asarray(matrix, dtype='float64'))
        if matrix.shape[0] != matrix.shape[1] or matrix.shape[0] not in (1, 2):
            raise ValueError(f'Anisotropy must be a 1x1 or 2x2 matrix, but received shape {matrix.shape}')
        if np.max(np.abs(matrix - matrix.T)) > MATRIX_SYMMETRY_TOL:
            raise EllipticityError(f'Anisotropy matrix is not symmetric: {matrix.tolist()}')
        eigenvalues = np.linalg.eigvalsh(matrix)
        if eigenvalues[0] <= 0:
            raise EllipticityError(f'Anisotropy matrix is not positive definite: eigenvalues {eigenvalues.tolist()}')
        if ellipticity is None:
            ellipticity = min(1.0, eigenvalues[0], 1.0 / eigenvalues[-1])
        _check_ellipticity(eigenvalues[0], eigenvalues[-1], ellipticity)
        matrix.setflags(write=False)
        self.matrix: np.ndarray = matrix
        self.ellipticity: float = float(ellipticity)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @staticmethod
    def identity(dim: int) -> AnisotropyMatrix:
        return AnisotropyMatrix(np.eye(dim))

    @staticmethod
    def scalar(dim: int, factor: float) -> AnisotropyMatrix:
        return AnisotropyMatrix(factor * np.eye(dim))

    def isotropic_factor(self) -> float | None:
        factor = self.matrix[0, 0]
        if np.array_equal(self.matrix, factor * np.eye(self.dim)):
            return float(factor)
        return None

    def proportionality_factor(self, other: AnisotropyMatrix) -> float | None:
        """
        :return: c > 0 with other = c * self (within rounding), otherwise None.
        """
        if other.dim != self.dim:
            return None
        factor = np.trace(other.matrix) / np.trace(self.matrix)
        scale = np.max(np.abs(other.matrix))
        if np.max(np.abs(other.matrix - factor * self.matrix)) <= PROPORTIONALITY_TOL * max(scale, 1.0):
            return float(factor)
        return None

    def describe(self) -> list[list[float]]:
        return self.matrix.tolist()


def _check_ellipticity(lowest: float, highest: float, ellipticity: float) -> None:
    if not 0 < ellipticity <= 1:
        raise EllipticityError(f'Ellipticity constant must lie in (0, 1], but received {ellipticity}')
    slack = 1e-14
    if lowest < ellipticity * (1 - slack) or highest > (1 + slack) / ellipticity:
        raise EllipticityError(f'Eigenvalues [{lowest}, {highest}] violate ellipticity {ellipticity}')


class AnisotropyField:
    """
    Per-node symmetric matrices gamma(x) sharing one global ellipticity constant.
    """
    def __init__(self, grid: Grid, matrices: np.ndarray, ellipticity: float | None = None,
                 smooth: bool = True) -> None:
        matrices = np.array(matrices, dtype='float64', copy=True)
        expected = grid.shape + (grid.dim, grid.dim)
        if matrices.shape != expected:
            raise ValueError(f'Anisotropy field needs shape {expected}, but received {matrices.shape}')
        if np.max(np.abs(matrices - np.swapaxes(matrices, -1, -2))) > MATRIX_SYMMETRY_TOL:
            raise EllipticityError('Anisotropy field is not symmetric at every node')
        eigenvalues = np.linalg.eigvalsh(matrices)
        lowest, highest = float(eigenvalues[..., 0].min()), float(eigenvalues[..., -1].max())
        if lowest <= 0:
            raise EllipticityError(f'Anisotropy field is not positive definite (smallest eigenvalue {lowest})')
        if ellipticity is None:
            ellipticity = min(1.0, lowest, 1.0 / highest)
        _check_ellipticity(lowest, highest, ellipticity)
        matrices.setflags(write=False)
        self.grid: Grid = grid
        self.matrices: np.ndarray = matrices
        self.ellipticity: float = float(ellipticity)
        self.smooth: bool = smooth

    @staticmethod
    def constant(grid: Grid, gamma: AnisotropyMatrix) -> AnisotropyField:
        if gamma.dim != grid.dim:
            raise ValueError(f'Anisotropy of dimension {gamma.dim} on a {grid.dim}-D grid')
        return AnisotropyField(grid, np.broadcast_to(gamma.matrix, grid.shape + gamma.matrix.shape))

    @staticmethod
    def scalar(grid: Grid, coefficient: GridField) -> AnisotropyField:
        grid.check_same(coefficient.grid)
        matrices = coefficient.values[..., None, None] * np.eye(grid.dim)
        return AnisotropyField(grid, matrices)

    def constant_matrix(self) -> AnisotropyMatrix | None:
        first = self.matrices.reshape(-1, self.grid.dim, self.grid.dim)[0]
        if np.all(self.matrices == first):
            return AnisotropyMatrix(first)
        return None

    def digest_values(self) -> np.ndarray:
        return self.matrices


class SelfAdjointOperator:
    """
    Dense symmetric matrix with a lazily computed, cached eigendecomposition (ascending eigenvalues).
    """
    def __init__(self, matrix: np.ndarray, grid: Grid | None = None,
                 eigensystem: tuple[np.ndarray, np.ndarray] | None = None) -> None:
        matrix = np.array(matrix, dtype='float64', copy=True)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f'Operator matrix must be square, but received shape {matrix.shape}')
        if eigensystem is None:
            scale = np.max(np.abs(matrix)) if matrix.size else 0.0
            asymmetry = np.max(np.abs(matrix - matrix.T)) if matrix.size else 0.0
            if asymmetry > OPERATOR_SYMMETRY_TOL * scale:
                raise ValueError(f'Operator is not symmetric: asymmetry {asymmetry:.3g} vs scale {scale:.3g}')
        matrix = 0.5 * (matrix + matrix.T)
        matrix.setflags(write=False)
        self.matrix: np.ndarray = matrix
        self.grid: Grid | None = grid
        self.eigen_computed: bool = False
        self._eigenvalues: np.ndarray | None = None
        self._eigenvectors: np.ndarray | None = None
        if eigensystem is not None:
            self._eigenvalues, self._eigenvectors = eigensystem
            self.eigen_computed = True

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def compute_eigensystem(self) -> None:
        if self.eigen_computed:
            return
        self._eigenvalues, self._eigenvectors = linalg.eigh(self.matrix)
        self.eigen_computed = True
        LOGGER.debug('Eigendecomposition of a %d x %d operator', self.size, self.size)

    @property
    def eigenvalues(self) -> np.ndarray:
        self.compute_eigensystem()
        return self._eigenvalues

    @property
    def eigenvectors(self) -> np.ndarray:
        self.compute_eigensystem()
        return self._eigenvectors

    def clamped_eigenvalues(self) -> np.ndarray:
        eigenvalues = self.eigenvalues
        top = np.max(np.abs(eigenvalues)) if eigenvalues.size else 0.0
        if eigenvalues.size and eigenvalues[0] < -NEGATIVE_EIGENVALUE_TOL * top:
            raise ValueError(f'Operator is not positive semidefinite: smallest eigenvalue {eigenvalues[0]:.3g}')
        return np.where(eigenvalues < ZERO_EIGENVALUE_TOL * top, 0.0, eigenvalues)

    def apply(self, vector: np.ndarray) -> np.ndarray:
        return self.matrix @ vector


def fractional_power(base: SelfAdjointOperator, sigma: float) -> SelfAdjointOperator:
    if not sigma > 0:
        raise ValueError(f'Fractional power needs sigma > 0, but received {sigma}')
    powered = base.clamped_eigenvalues() ** sigma
    vectors = base.eigenvectors
    matrix = (vectors * powered) @ vectors.T
    return SelfAdjointOperator(matrix, base.grid, eigensystem=(powered, vectors))


def _difference(m: int, h: float, forward: bool, periodic: bool) -> sp.csr_matrix:
    if forward:
        matrix = sp.eye(m, k=1, format='csr') - sp.eye(m, format='csr')
        wrap = sp.csr_matrix(([1.0], ([m - 1], [0])), shape=(m, m))
    else:
        matrix = sp.eye(m, format='csr') - sp.eye(m, k=-1, format='csr')
        wrap = sp.csr_matrix(([-1.0], ([0], [m - 1])), shape=(m, m))
    if periodic:
        matrix = matrix + wrap
    return (matrix / h).tocsr()


def _axis_operator(matrix: sp.csr_matrix, axis: int, dim: int) -> sp.csr_matrix:
    if dim == 1:
        return matrix
    identity = sp.eye(matrix.shape[0], format='csr')
    return sp.kron(matrix, identity, format='csr') if axis == 0 else sp.kron(identity, matrix, format='csr')


def _extension(n: int, dim: int, periodic: bool) -> sp.csr_matrix:
    if periodic:
        return sp.eye(n ** dim, format='csr')
    padded = sp.csr_matrix((np.ones(n), (np.arange(1, n + 1), np.arange(n))), shape=(n + 2, n))
    return padded if dim == 1 else sp.kron(padded, padded, format='csr')


def assemble_elliptic(grid: Grid, gamma: AnisotropyField | AnisotropyMatrix,
                      boundary: BoundaryType = BoundaryType.PERIODIC,
                      params: AssemblyParams = AssemblyParams()) -> SelfAdjointOperator:
    """
    Conservative second-order discretization of -div(gamma grad): the average over all one-sided
    difference pairs of B^T Gamma B. Diagonal entries of gamma end up face-averaged.
    Dirichlet boundaries use a ghost layer of zeros around the box.
    :return: Symmetric positive semidefinite operator over the full lattice.
    """
    check_params_type(params, AssemblyParams)
    if grid.size > params.max_dofs:
        raise DofCapExceededError(f'{grid.size} lattice nodes exceed the dense cap of {params.max_dofs}')
    if isinstance(gamma, AnisotropyMatrix):
        gamma = AnisotropyField.constant(grid, gamma)
    grid.check_same(gamma.grid)
    dim, n, h = grid.dim, grid.points_per_axis, grid.spacing
    periodic = boundary == BoundaryType.PERIODIC
    m = n if periodic else n + 2
    coefficients = gamma.matrices
    if not periodic:
        coefficients = np.pad(coefficients, [(1, 1)] * dim + [(0, 0), (0, 0)], mode='edge')
    extension = _extension(n, dim, periodic)
    one_sided = (_difference(m, h, True, periodic), _difference(m, h, False, periodic))
    result = sp.csr_matrix((grid.size, grid.size))
    for choice in itertools.product(one_sided, repeat=dim):
        gradients = [_axis_operator(choice[axis], axis, dim) @ extension for axis in range(dim)]
        for a in range(dim):
            for b in range(dim):
                weights = coefficients[..., a, b].reshape(-1)
                if np.any(weights):
                    result = result + gradients[a].T @ sp.diags(weights) @ gradients[b]
    matrix = (result / 2 ** dim).toarray()
    LOGGER.debug('Assembled %s elliptic operator with %d DOFs', boundary.value, grid.size)
    return SelfAdjointOperator(matrix, grid)


def _real_fourier_basis(grid: Grid) -> np.ndarray:
    """
    Orthonormal real eigenbasis of every circulant operator with an even symbol: cos/sin pairs of +-k.
    :return: Tuple of (matrix of basis vectors as columns, flat transform indices of the modes).
    """
    n, dim = grid.points_per_axis, grid.dim
    phases = [2 * np.pi * index / n for index in np.meshgrid(*([np.arange(n)] * dim), indexing='ij')]
    vectors, modes, seen = [], [], set()
    for mode in itertools.product(range(n), repeat=dim):
        partner = tuple((-k) % n for k in mode)
        if partner in seen:
            continue
        seen.add(mode)
        theta = sum(k * phase for k, phase in zip(mode, phases)).reshape(-1)
        flat = int(np.ravel_multi_index(mode, grid.shape))
        if partner == mode:
            vectors.append(np.cos(theta) / np.sqrt(grid.size))
            modes.append(flat)
        else:
            vectors.append(np.sqrt(2.0 / grid.size) * np.cos(theta))
            vectors.append(np.sqrt(2.0 / grid.size) * np.sin(theta))
            modes.extend([flat, flat])
    return np.array(vectors).T, np.array(modes)


def assemble_symbol_matrix(grid: Grid, gamma: AnisotropyMatrix) -> SelfAdjointOperator:
    """
    Circulant operator whose eigenvalues are exactly the symbol values xi^T gamma xi of the lattice.
    """
    vectors, modes = _real_fourier_basis(grid)
    eigenvalues = np.maximum(grid.quadratic_symbol(gamma.matrix), 0.0).reshape(-1)[modes]
    order = np.argsort(eigenvalues, kind='stable')
    eigenvalues, vectors = eigenvalues[order], vectors[:, order]
    matrix = (vectors * eigenvalues) @ vectors.T
    return SelfAdjointOperator(matrix, grid, eigensystem=(eigenvalues, vectors))


class FractionalBackend(ABC):
    backend_type: BackendType

    def __init__(self, grid: Grid, sigma: float) -> None:
        if not np.isfinite(sigma) or sigma < 0:
            raise ValueError(f'Fractional order must be finite and nonnegative, but received {sigma}')
        self.grid: Grid = grid
        self.sigma: float = float(sigma)

    @abstractmethod
    def apply(self, u: GridField) -> GridField:
        pass

    @abstractmethod
    def with_order(self, sigma: float) -> FractionalBackend:
        pass

    @abstractmethod
    def columns(self, nodes: np.ndarray) -> np.ndarray:
        """
        :return: Responses to the unit nodal fields at `nodes`, shape (grid.size, len(nodes)).
        """
        pass

    @abstractmethod
    def describe(self) -> dict[str, any]:
        pass

    def proportionality_factor(self, other: FractionalBackend) -> float | None:
        return None

    def check_field(self, u: GridField) -> None:
        self.grid.check_same(u.grid)
        u.check_finite()

    @staticmethod
    def get_backends() -> dict[str, type[FractionalBackend]]:
        return {cls.__name__: cls for cls in FractionalBackend.__subclasses__()}


class IdentityBackend(FractionalBackend):
    backend_type = BackendType.IDENTITY

    def __init__(self, grid: Grid) -> None:
        super().__init__(grid, 0.0)

    def apply(self, u: GridField) -> GridField:
        self.check_field(u)
        return GridField(u.grid, u.values)

    def with_order(self, sigma: float) -> FractionalBackend:
        if sigma != 0:
            raise ValueError(f'The identity backend has no anisotropy to raise to order {sigma}')
        return self

    def columns(self, nodes: np.ndarray) -> np.ndarray:
        result = np.zeros((self.grid.size, len(nodes)))
        result[nodes, np.arange(len(nodes))] = 1.0
        return result

    def describe(self) -> dict[str, any]:
        return {'backend': self.backend_type.value, 'sigma': 0.0}


class FourierSymbolBackend(FractionalBackend):
    """
    Exact (xi^T gamma xi)^sigma multiplier for constant anisotropy.
    """
    backend_type = BackendType.FOURIER_SYMBOL

    def __init__(self, grid: Grid, gamma: AnisotropyMatrix, sigma: float) -> None:
        super().__init__(grid, sigma)
        if gamma.dim != grid.dim:
            raise ValueError(f'Anisotropy of dimension {gamma.dim} on a {grid.dim}-D grid')
        self.gamma: AnisotropyMatrix = gamma
        self.base_symbol: np.ndarray = np.maximum(grid.quadratic_symbol(gamma.matrix), 0.0)
        self.symbol: np.ndarray = self.base_symbol ** self.sigma if self.sigma > 0 else np.ones(grid.shape)

    def apply(self, u: GridField) -> GridField:
        self.check_field(u)
        return apply_symbol(u, self.symbol)

    def with_order(self, sigma: float) -> FractionalBackend:
        if sigma == 0:
            return IdentityBackend(self.grid)
        return FourierSymbolBackend(self.grid, self.gamma, sigma)

    def columns(self, nodes: np.ndarray) -> np.ndarray:
        return symbol_columns(self.grid, self.symbol, nodes)

    def proportionality_factor(self, other: FractionalBackend) -> float | None:
        if isinstance(other, FourierSymbolBackend) and other.grid == self.grid:
            return self.gamma.proportionality_factor(other.gamma)
        return None

    def describe(self) -> dict[str, any]:
        return {'backend': self.backend_type.value, 'sigma': self.sigma, 'gamma': self.gamma.describe()}


class MatrixFunctionBackend(FractionalBackend):
    """
    lambda^sigma applied in the eigenbasis of an assembled self-adjoint operator over the full lattice.
    Backends derived through with_order share the base operator and its cached eigendecomposition.
    """
    backend_type = BackendType.MATRIX_FUNCTION

    def __init__(self, base: SelfAdjointOperator, sigma: float, gamma: AnisotropyField | None = None,
                 boundary: BoundaryType = BoundaryType.PERIODIC) -> None:
        if base.grid is None or base.size != base.grid.size:
            raise ValueError('Matrix-function backend needs an operator over the full lattice')
        super().__init__(base.grid, sigma)
        if self.sigma == 0:
            raise ValueError('Matrix-function backend needs a positive order; use IdentityBackend for order 0')
        self.base: SelfAdjointOperator = base
        self.gamma: AnisotropyField | None = gamma
        self.boundary: BoundaryType = boundary
        self.power_computed: bool = False
        self._power: SelfAdjointOperator | None = None

    @property
    def operator(self) -> SelfAdjointOperator:
        if not self.power_computed:
            self._power = fractional_power(self.base, self.sigma)
            self.power_computed = True
        return self._power

    def apply(self, u: GridField) -> GridField:
        self.check_field(u)
        return GridField(u.grid, self.operator.apply(u.flat))

    def with_order(self, sigma: float) -> FractionalBackend:
        if sigma == 0:
            return IdentityBackend(self.grid)
        return MatrixFunctionBackend(self.base, sigma, self.gamma, self.boundary)

    def columns(self, nodes: np.ndarray) -> np.ndarray:
        return self.operator.matrix[:, nodes]

    def proportionality_factor(self, other: FractionalBackend) -> float | None:
        if not isinstance(other, MatrixFunctionBackend) or other.boundary != self.boundary:
            return None
        if other.base is self.base:
            return 1.0
        if self.gamma is None or other.gamma is None:
            return None
        mine, theirs = self.gamma.constant_matrix(), other.gamma.constant_matrix()
        if mine is not None and theirs is not None:
            return mine.proportionality_factor(theirs)
        ratio = other.gamma.matrices[..., 0, 0] / self.gamma.matrices[..., 0, 0]
        factor = float(ratio.reshape(-1)[0])
        if np.max(np.abs(other.gamma.matrices - factor * self.gamma.matrices)) <= \
                PROPORTIONALITY_TOL * max(np.max(np.abs(other.gamma.matrices)), 1.0):
            return factor
        return None

    def describe(self) -> dict[str, any]:
        description = {'backend': self.backend_type.value, 'sigma': self.sigma, 'boundary': self.boundary.value}
        if self.gamma is not None:
            constant = self.gamma.constant_matrix()
            description['gamma'] = constant.describe() if constant is not None else 'variable'
        return description


def make_backend(grid: Grid, gamma: AnisotropyMatrix | AnisotropyField, sigma: float,
                 backend_type: BackendType = BackendType.FOURIER_SYMBOL,
                 boundary: BoundaryType = BoundaryType.PERIODIC,
                 base: SelfAdjointOperator | None = None,
                 params: AssemblyParams = AssemblyParams()) -> FractionalBackend:
    if sigma == 0:
        return IdentityBackend(grid)
    if backend_type == BackendType.FOURIER_SYMBOL:
        if isinstance(gamma, AnisotropyField):
            constant = gamma.constant_matrix()
            if constant is None:
                raise ValueError('The Fourier-symbol backend needs a constant anisotropy matrix')
            gamma = constant
        return FourierSymbolBackend(grid, gamma, sigma)
    if backend_type == BackendType.MATRIX_FUNCTION:
        if isinstance(gamma, AnisotropyMatrix):
            gamma = AnisotropyField.constant(grid, gamma)
        if base is None:
            base = assemble_elliptic(grid, gamma, boundary, params)
        return MatrixFunctionBackend(base, sigma, gamma, boundary)
    raise ValueError(f'Unsupported backend type {backend_type}')


def apply_fractional(backend: FractionalBackend, u: GridField) -> GridField:
    return backend.apply(u)


def half_power_form(backend: FractionalBackend, u: GridField, v: GridField) -> float:
    """
    <(-Delta_gamma)^{sigma/2} u, (-Delta_gamma)^{sigma/2} v> under lattice quadrature.
    """
    u.grid.check_same(v.grid)
    backend.check_field(u)
    backend.check_field(v)
    half = backend.with_order(backend.sigma / 2)
    return half.apply(u).inner(half.apply(v))
