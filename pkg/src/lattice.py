from __future__ import annotations
import logging
import numbers
from dataclasses import dataclass
from functools import cached_property
from typing import Callable
import numpy as np
from src.enums import *
from src.errors import *

LOGGER = logging.getLogger(__name__)

MIN_POINTS: int = 8
IMAG_LEAK_TOL: float = 1e-12


@dataclass(frozen=True)
class Grid:
    """
    Periodic lattice on the box [-L, L)^dim with N nodes per axis. Node j of an axis sits at -L + j*h.
    Frequencies follow xi_k = pi*k/L; `frequencies` lists them sorted, `wavenumbers` in transform order.
    """
    dim: int
    extent: float
    points_per_axis: int

    def __post_init__(self) -> None:
        if self.dim not in (1, 2) or isinstance(self.dim, bool):
            raise ValueError(f'Grid dimension must be 1 or 2, but received {self.dim}')
        n = self.points_per_axis
        if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < MIN_POINTS or n & (n - 1) != 0:
            raise ValueError(f'Points per axis must be a power of two >= {MIN_POINTS}, but received {n}')
        if not np.isfinite(self.extent) or self.extent <= 0:
            raise ValueError(f'Grid extent must be positive and finite, but received {self.extent}')
        object.__setattr__(self, 'extent', float(self.extent))
        object.__setattr__(self, 'points_per_axis', int(n))

    @property
    def spacing(self) -> float:
        return 2.0 * self.extent / self.points_per_axis

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.points_per_axis ** self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    @cached_property
    def coordinates(self) -> np.ndarray:
        return -self.extent + np.arange(self.points_per_axis) * self.spacing

    @cached_property
    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.coordinates] * self.dim), indexing='ij'))

    @cached_property
    def frequencies(self) -> np.ndarray:
        n = self.points_per_axis
        return np.arange(-n // 2, n // 2) * (np.pi / self.extent)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        n = self.points_per_axis
        k = np.rint(np.fft.fftfreq(n) * n)
        return k * (np.pi / self.extent)

    @cached_property
    def wave_mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.wavenumbers] * self.dim), indexing='ij'))

    @cached_property
    def xi_squared(self) -> np.ndarray:
        return sum(xi ** 2 for xi in self.wave_mesh)

    def quadratic_symbol(self, gamma: np.ndarray) -> np.ndarray:
        """
        :param gamma: Constant dim x dim symmetric matrix.
        :return: xi^T gamma xi on the transform grid.
        """
        gamma = np.asarray(gamma, dtype='float64').reshape(self.dim, self.dim)
        result = np.zeros(self.shape)
        for a in range(self.dim):
            for b in range(self.dim):
                if gamma[a, b] != 0.0:
                    result = result + gamma[a, b] * self.wave_mesh[a] * self.wave_mesh[b]
        return result

    def check_same(self, other: Grid) -> None:
        if self != other:
            self.raise_grid_mismatch_error(other)

    def raise_grid_mismatch_error(self, other: Grid) -> None:
        raise GridMismatchError(f'Grid mismatch: {self.describe()} vs {other.describe()}')

    def describe(self) -> dict[str, any]:
        return {'dim': self.dim, 'extent': self.extent, 'points_per_axis': self.points_per_axis}


def make_grid(dim: int, extent: float, points_per_axis: int) -> Grid:
    grid = Grid(dim, extent, points_per_axis)
    LOGGER.debug('Grid %s with spacing %.6g', grid.describe(), grid.spacing)
    return grid


class GridField:
    __array_ufunc__ = None  # numpy scalars defer to the reflected operators below

    def __init__(self, grid: Grid, values: np.ndarray | float) -> None:
        data = np.array(values, copy=True)
        if data.ndim == 0:
            data = np.full(grid.shape, data.item())
        if data.size != grid.size:
            raise ValueError(f'Field needs {grid.size} values on grid {grid.describe()}, but received {data.size}')
        data = data.reshape(grid.shape)
        data = data.astype(np.complex128 if np.iscomplexobj(data) else np.float64)
        data.setflags(write=False)
        self.grid: Grid = grid
        self.values: np.ndarray = data

    @staticmethod
    def zeros(grid: Grid) -> GridField:
        return GridField(grid, np.zeros(grid.shape))

    @staticmethod
    def constant(grid: Grid, value: float) -> GridField:
        return GridField(grid, np.full(grid.shape, value))

    @staticmethod
    def from_function(grid: Grid, func: Callable[..., np.ndarray]) -> GridField:
        values = np.broadcast_to(func(*grid.mesh), grid.shape)
        return GridField(grid, values)

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.values)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def check_finite(self) -> None:
        if not self.is_finite():
            raise ValueError('Field contains non-finite values')

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def l2_norm(self) -> float:
        return float(np.sqrt(self.grid.cell_volume * np.sum(np.abs(self.values) ** 2)))

    def inner(self, other: GridField) -> float:
        self.grid.check_same(other.grid)
        return float(np.real(self.grid.cell_volume * np.sum(self.values * np.conj(other.values))))

    def real_part(self) -> GridField:
        return GridField(self.grid, np.real(self.values))

    def _operand(self, other: GridField | numbers.Number) -> np.ndarray | numbers.Number:
        if isinstance(other, GridField):
            self.grid.check_same(other.grid)
            return other.values
        if isinstance(other, (numbers.Number, np.number)):
            return other
        raise TypeError(f'Unsupported operand of type {type(other).__name__} for GridField')

    def __add__(self, other: GridField | numbers.Number) -> GridField:
        return GridField(self.grid, self.values + self._operand(other))

    def __radd__(self, other: numbers.Number) -> GridField:
        return self.__add__(other)

    def __sub__(self, other: GridField | numbers.Number) -> GridField:
        return GridField(self.grid, self.values - self._operand(other))

    def __rsub__(self, other: numbers.Number) -> GridField:
        return GridField(self.grid, self._operand(other) - self.values)

    def __mul__(self, other: GridField | numbers.Number) -> GridField:
        return GridField(self.grid, self.values * self._operand(other))

    def __rmul__(self, other: numbers.Number) -> GridField:
        return self.__mul__(other)

    def __truediv__(self, other: GridField | numbers.Number) -> GridField:
        return GridField(self.grid, self.values / self._operand(other))

    def __neg__(self) -> GridField:
        return GridField(self.grid, -self.values)

    def __pow__(self, exponent: int | float) -> GridField:
        return GridField(self.grid, self.values ** exponent)

    def __repr__(self) -> str:
        kind = 'real' if self.is_real else 'complex'
        return f'GridField({kind}, grid={self.grid.describe()}, max_abs={self.max_abs():.3g})'


def plane_wave(grid: Grid, mode: tuple[int, ...]) -> GridField:
    """
    Complex plane wave exp(i xi.x) with xi = pi*mode/L.
    """
    mode = tuple(int(k) for k in np.atleast_1d(mode))
    if len(mode) != grid.dim:
        raise ValueError(f'Mode must have {grid.dim} components, but received {mode}')
    phase = sum(np.pi * k / grid.extent * x for k, x in zip(mode, grid.mesh))
    return GridField(grid, np.exp(1j * phase))


def forward_transform(u: GridField) -> np.ndarray:
    return np.fft.fftn(u.values)


def inverse_transform(grid: Grid, coefficients: np.ndarray, real: bool) -> GridField:
    values = np.fft.ifftn(coefficients)
    if real:
        reference = np.sum(np.abs(coefficients)) / grid.size
        leak = float(np.max(np.abs(values.imag)))
        if reference > 0 and leak > IMAG_LEAK_TOL * reference:
            LOGGER.warning('Imaginary leakage %.3g after inverse transform of a real field', leak / reference)
        values = values.real
    return GridField(grid, values)


def apply_symbol(u: GridField, symbol: np.ndarray) -> GridField:
    """
    Spectral multiplier: inverse transform of symbol * u_hat. The symbol is given in transform order.
    """
    if symbol.shape != u.grid.shape:
        raise ValueError(f'Symbol shape {symbol.shape} does not match grid shape {u.grid.shape}')
    return inverse_transform(u.grid, symbol * forward_transform(u), real=u.is_real)


def symbol_columns(grid: Grid, symbol: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """
    Dense responses of a spectral multiplier to unit nodal fields at `nodes` (flat indices).
    :return: Array of shape (grid.size, len(nodes)).
    """
    kernel = np.fft.ifftn(symbol).real
    columns = np.empty((grid.size, len(nodes)))
    for col, node in enumerate(nodes):
        shift = np.unravel_index(node, grid.shape)
        columns[:, col] = np.roll(kernel, shift, axis=tuple(range(grid.dim))).reshape(-1)
    return columns


def _spectral_energy(u: GridField, weight: np.ndarray) -> float:
    u.check_finite()
    coefficients = forward_transform(u)
    return float(u.grid.cell_volume / u.grid.size * np.sum(weight * np.abs(coefficients) ** 2))


def sobolev_norm(u: GridField, s: float) -> float:
    """
    Discrete H^s norm, || (1+|xi|^2)^{s/2} u_hat ||, normalized so that s = 0 gives the L2 norm.
    """
    return float(np.sqrt(_spectral_energy(u, (1.0 + u.grid.xi_squared) ** s)))


def homogeneous_norm(u: GridField, r: float) -> float:
    """
    || |xi|^r u_hat || with 0^0 := 1, i.e. the L2 norm of (-Delta)^{r/2} u.
    """
    xi2 = u.grid.xi_squared
    if r == 0:
        weight = np.ones_like(xi2)
    else:
        weight = np.where(xi2 > 0, xi2, 1.0) ** r * (xi2 > 0)
    return float(np.sqrt(_spectral_energy(u, weight)))


@dataclass(frozen=True)
class RegionSpec:
    shape: RegionShape
    center: tuple[float, ...]
    half_widths: tuple[float, ...] | None = None
    radius: float | None = None

    @staticmethod
    def box(center: tuple[float, ...], half_widths: tuple[float, ...]) -> RegionSpec:
        return RegionSpec(RegionShape.BOX, tuple(float(c) for c in np.atleast_1d(center)),
                          half_widths=tuple(float(w) for w in np.atleast_1d(half_widths)))

    @staticmethod
    def ball(center: tuple[float, ...], radius: float) -> RegionSpec:
        return RegionSpec(RegionShape.BALL, tuple(float(c) for c in np.atleast_1d(center)), radius=float(radius))

    def reach(self) -> np.ndarray:
        if self.shape == RegionShape.BOX:
            return np.asarray(self.half_widths)
        return np.full(len(self.center), self.radius)

    def to_dict(self) -> dict[str, any]:
        return {'shape': self.shape.value, 'center': list(self.center),
                'half_widths': None if self.half_widths is None else list(self.half_widths), 'radius': self.radius}


class Region:
    def __init__(self, grid: Grid, mask: np.ndarray, kind: RegionKind) -> None:
        mask = np.array(mask, dtype=bool, copy=True)
        if mask.size != grid.size:
            raise ValueError(f'Region mask needs {grid.size} entries, but received {mask.size}')
        mask = mask.reshape(grid.shape)
        mask.setflags(write=False)
        self.grid: Grid = grid
        self.mask: np.ndarray = mask
        self.kind: RegionKind = kind

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def cardinality(self) -> int:
        return int(np.count_nonzero(self.mask))

    def is_subset_of(self, other: Region) -> bool:
        self.grid.check_same(other.grid)
        return bool(np.all(other.mask[self.mask]))

    def __repr__(self) -> str:
        return f'Region({self.kind.value}, {self.cardinality}/{self.grid.size} nodes)'


def _shape_mask(grid: Grid, spec: RegionSpec) -> np.ndarray:
    if len(spec.center) != grid.dim:
        raise ValueError(f'Region center must have {grid.dim} components, but received {spec.center}')
    offsets = [x - c for x, c in zip(grid.mesh, spec.center)]
    if spec.shape == RegionShape.BOX:
        if spec.half_widths is None or len(spec.half_widths) != grid.dim or min(spec.half_widths) <= 0:
            raise ValueError(f'Box region needs {grid.dim} positive half widths, but received {spec.half_widths}')
        mask = np.ones(grid.shape, dtype=bool)
        for offset, width in zip(offsets, spec.half_widths):
            mask &= np.abs(offset) < width
        return mask
    if spec.radius is None or spec.radius <= 0:
        raise ValueError(f'Ball region needs a positive radius, but received {spec.radius}')
    return sum(offset ** 2 for offset in offsets) < spec.radius ** 2


def define_region(grid: Grid, spec: RegionSpec, kind: RegionKind = RegionKind.OMEGA) -> Region:
    """
    Node mask of a box or ball whose closure lies strictly inside the periodic box.
    Nodes with strict inequality belong to the region.
    """
    center = np.asarray(spec.center, dtype='float64')
    reach = spec.reach()
    if len(center) != grid.dim or np.any(center - reach <= -grid.extent) or np.any(center + reach >= grid.extent):
        raise ValueError(f'Region {spec.to_dict()} is not strictly inside the box [-{grid.extent}, {grid.extent})')
    mask = _shape_mask(grid, spec)
    if not mask.any():
        raise EmptyRegionError(f'Region {spec.to_dict()} contains no lattice node')
    return Region(grid, mask, kind)


def full_region(grid: Grid) -> Region:
    return Region(grid, np.ones(grid.shape, dtype=bool), RegionKind.FULL)


def complement_region(omega: Region) -> Region:
    return Region(omega.grid, ~omega.mask, RegionKind.OMEGA_COMPLEMENT)


def window_region(grid: Grid, spec: RegionSpec, omega: Region) -> Region:
    window = define_region(grid, spec, RegionKind.WINDOW)
    if np.any(window.mask & omega.mask):
        raise ValueError(f'Window {spec.to_dict()} must lie in the exterior of the interior region')
    return window


def effective_region(omega: Region, mask: np.ndarray) -> Region:
    region = Region(omega.grid, mask, RegionKind.EFFECTIVE)
    if not region.is_subset_of(omega):
        raise ValueError('Effective set must be a subset of the interior region')
    return region


def restrict_field(u: GridField, r: Region) -> GridField:
    """
    Values of u on the masked nodes of r, zero elsewhere.
    """
    u.grid.check_same(r.grid)
    return GridField(u.grid, np.where(r.mask, u.values, 0))


def embed_field(v: GridField, r: Region) -> GridField:
    """
    Extension by zero of a field known only on r. Values of v off the mask are discarded, so on full-lattice
    fields this is restrict_field.
    """
    return restrict_field(v, r)


def gather(u: GridField, r: Region) -> np.ndarray:
    u.grid.check_same(r.grid)
    return u.flat[r.nodes]


def scatter(vector: np.ndarray, r: Region) -> GridField:
    vector = np.asarray(vector)
    if vector.shape != (r.cardinality,):
        raise ValueError(f'Expected {r.cardinality} region values, but received shape {vector.shape}')
    values = np.zeros(r.grid.size, dtype=np.complex128 if np.iscomplexobj(vector) else np.float64)
    values[r.nodes] = vector
    return GridField(r.grid, values)
