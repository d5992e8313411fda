import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from src.lattice import *


class TestGrid:
    test_map = {
        (1, np.pi, 16): {'spacing': 2 * np.pi / 16, 'size': 16},
        (1, 2.0, 64): {'spacing': 1 / 16, 'size': 64},
        (2, 1.0, 32): {'spacing': 1 / 16, 'size': 1024},
    }

    @pytest.mark.parametrize('key', test_map.keys())
    def test_geometry(self, key):
        grid = make_grid(*key)
        expected = TestGrid.test_map[key]
        assert grid.spacing == pytest.approx(expected['spacing'], rel=1e-15)
        assert grid.size == expected['size']
        assert grid.spacing * grid.points_per_axis == 2 * grid.extent
        assert grid.coordinates[0] == -grid.extent

    @pytest.mark.parametrize('dim, extent, points', [(3, 1.0, 16), (1, 1.0, 12), (1, 1.0, 4), (1, 0.0, 16),
                                                     (1, -1.0, 16), (1, np.inf, 16), (True, 1.0, 16)])
    def test_invalid(self, dim, extent, points):
        with pytest.raises(ValueError):
            make_grid(dim, extent, points)

    def test_frequencies(self):
        grid = make_grid(1, np.pi, 16)
        assert np.allclose(grid.frequencies, np.arange(-8, 8))
        assert np.allclose(np.sort(grid.wavenumbers), grid.frequencies)
        assert np.allclose(grid.frequencies[1:], -grid.frequencies[1:][::-1])

    def test_mismatch(self):
        with pytest.raises(GridMismatchError):
            make_grid(1, np.pi, 16).check_same(make_grid(1, np.pi, 32))


class TestGridField:
    grid = make_grid(1, np.pi, 16)

    def test_length(self):
        with pytest.raises(ValueError):
            GridField(self.grid, np.zeros(15))

    def test_read_only(self):
        u = GridField(self.grid, np.arange(16.0))
        with pytest.raises(ValueError):
            u.values[0] = 1.0

    def test_arithmetic(self):
        u = GridField(self.grid, np.arange(16.0))
        v = np.float64(2.0) * u - 1.0
        assert isinstance(v, GridField)
        assert np.array_equal(v.values, 2 * np.arange(16.0) - 1)
        with pytest.raises(GridMismatchError):
            u + GridField.zeros(make_grid(1, np.pi, 32))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            GridField(self.grid, np.full(16, np.nan)).check_finite()


class TestSpectralNorms:
    grid = make_grid(1, np.pi, 64)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2 ** 31 - 1))
    def test_parseval(self, seed):
        u = GridField(self.grid, np.random.default_rng(seed).standard_normal(64))
        assert sobolev_norm(u, 0.0) == pytest.approx(u.l2_norm(), rel=1e-12)
        assert homogeneous_norm(u, 0.0) == pytest.approx(u.l2_norm(), rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2 ** 31 - 1), s=st.floats(-2.0, 2.0), t=st.floats(-2.0, 2.0))
    def test_monotone_in_order(self, seed, s, t):
        u = GridField(self.grid, np.random.default_rng(seed).standard_normal(64))
        low, high = min(s, t), max(s, t)
        assert sobolev_norm(u, low) <= sobolev_norm(u, high) * (1 + 1e-12)

    @pytest.mark.parametrize('mode, s', [(2, 1.0), (3, 0.5), (-5, 1.5)])
    def test_plane_wave(self, mode, s):
        u = plane_wave(self.grid, (mode,))
        expected = (1.0 + mode ** 2) ** (s / 2) * u.l2_norm()
        assert sobolev_norm(u, s) == pytest.approx(expected, rel=1e-12)

    def test_dense_oracle(self):
        u = GridField(self.grid, np.exp(-self.grid.coordinates ** 2))
        x, xi = self.grid.coordinates, self.grid.wavenumbers
        coefficients = np.exp(-1j * np.outer(xi, x - x[0])) @ u.values
        expected = np.sqrt(self.grid.cell_volume / 64 * np.sum((1 + xi ** 2) ** 0.7 * np.abs(coefficients) ** 2))
        assert sobolev_norm(u, 0.7) == pytest.approx(expected, rel=1e-10)

    def test_zero(self):
        assert sobolev_norm(GridField.zeros(self.grid), 1.0) == 0.0

    def test_non_finite(self):
        with pytest.raises(ValueError):
            sobolev_norm(GridField(self.grid, np.full(64, np.inf)), 1.0)

    def test_symbol_columns_identity(self):
        nodes = np.array([0, 5, 63])
        columns = symbol_columns(self.grid, np.ones(self.grid.shape), nodes)
        assert np.allclose(columns, np.eye(64)[:, nodes], atol=1e-14)


class TestRegion:
    grid = make_grid(1, np.pi, 64)
    omega = define_region(grid, RegionSpec.box((0.0,), (1.0,)))

    def test_box_mask(self):
        assert np.array_equal(self.omega.mask, np.abs(self.grid.coordinates) < 1.0)
        assert self.omega.kind == RegionKind.OMEGA

    def test_ball_2d(self):
        grid = make_grid(2, 1.0, 32)
        ball = define_region(grid, RegionSpec.ball((0.0, 0.0), 0.5))
        x = grid.coordinates
        expected = sum(1 for a in x for b in x if a * a + b * b < 0.25)
        assert ball.cardinality == expected

    @pytest.mark.parametrize('spec', [RegionSpec.box((0.0,), (np.pi,)), RegionSpec.box((3.0,), (0.5,)),
                                      RegionSpec.ball((0.0,), 4.0)])
    def test_not_strictly_interior(self, spec):
        with pytest.raises(ValueError):
            define_region(self.grid, spec)

    def test_empty(self):
        with pytest.raises(EmptyRegionError):
            define_region(make_grid(1, 1.0, 8), RegionSpec.box((0.05,), (0.01,)))

    def test_complement_partition(self):
        exterior = complement_region(self.omega)
        assert np.all(self.omega.mask ^ exterior.mask)
        assert self.omega.cardinality + exterior.cardinality == self.grid.size

    def test_window(self):
        window = window_region(self.grid, RegionSpec.box((2.0,), (0.5,)), self.omega)
        assert window.kind == RegionKind.WINDOW
        with pytest.raises(ValueError):
            window_region(self.grid, RegionSpec.box((0.5,), (1.0,)), self.omega)

    def test_effective_subset(self):
        with pytest.raises(ValueError):
            effective_region(self.omega, np.ones(self.grid.shape, dtype=bool))


class TestRestriction:
    grid = make_grid(1, np.pi, 64)
    omega = define_region(grid, RegionSpec.box((0.0,), (1.0,)))
    u = GridField(grid, np.cos(grid.coordinates) + 2.0)

    def test_partition_sum(self):
        inside = restrict_field(self.u, self.omega)
        outside = restrict_field(self.u, complement_region(self.omega))
        assert np.array_equal((inside + outside).values, self.u.values)
        assert np.array_equal(restrict_field(self.u, full_region(self.grid)).values, self.u.values)

    def test_idempotent(self):
        once = restrict_field(self.u, self.omega)
        assert np.array_equal(restrict_field(once, self.omega).values, once.values)
        assert np.array_equal(embed_field(once, self.omega).values, once.values)

    def test_embed_discards_off_mask_values(self):
        embedded = embed_field(self.u, self.omega)
        assert np.all(embedded.values[~self.omega.mask] == 0)
        assert np.array_equal(embedded.values[self.omega.mask], self.u.values[self.omega.mask])
        assert np.array_equal(embedded.values, restrict_field(self.u, self.omega).values)

    def test_gather_scatter(self):
        values = gather(self.u, self.omega)
        assert len(values) == self.omega.cardinality
        assert np.array_equal(scatter(values, self.omega).values, restrict_field(self.u, self.omega).values)
        with pytest.raises(ValueError):
            scatter(values[:-1], self.omega)

    def test_mismatch(self):
        with pytest.raises(GridMismatchError):
            restrict_field(GridField.zeros(make_grid(1, np.pi, 32)), self.omega)
