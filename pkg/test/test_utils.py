import json
import struct
import numpy as np
import pytest
from src.utils import *

XS = [np.array([2.0, -1.0]), np.array([3.0, 0.5]), np.array([5.0, 4.0]), np.array([7.0, 1.5])]


class TestPartialBell:
    test_map = {
        (3, 2): lambda x1, x2, x3, x4: 3 * x1 * x2,
        (4, 2): lambda x1, x2, x3, x4: 4 * x1 * x3 + 3 * x2 ** 2,
        (4, 3): lambda x1, x2, x3, x4: 6 * x1 ** 2 * x2,
        (4, 4): lambda x1, x2, x3, x4: x1 ** 4,
        (4, 1): lambda x1, x2, x3, x4: x4,
        (2, 0): lambda x1, x2, x3, x4: np.zeros_like(x1),
        (0, 0): lambda x1, x2, x3, x4: np.ones_like(x1),
        (2, 3): lambda x1, x2, x3, x4: np.zeros_like(x1),
    }

    @pytest.mark.parametrize('key', test_map.keys())
    def test_values(self, key):
        n, k = key
        assert np.allclose(partial_bell(n, k, XS), TestPartialBell.test_map[key](*XS))


class TestFitSlope:
    @pytest.mark.parametrize('power', [-2.0, 1.0, 0.5])
    def test_power_law(self, power):
        xs = [1e-3, 2e-3, 4e-3, 8e-3]
        assert fit_slope(xs, [3.0 * x ** power for x in xs]) == pytest.approx(power)


class TestFieldRecords:
    grid = make_grid(2, 1.5, 8)
    u = GridField(grid, np.arange(64.0).reshape(8, 8) / 7)

    def test_header(self):
        payload = field_to_bytes(self.u)
        assert payload[:4] == FIELD_MAGIC
        assert struct.unpack_from('<3I', payload, 4) == (2, 8, 8)
        assert struct.unpack_from('<d', payload, 16)[0] == 1.5
        assert len(payload) == 24 + 8 * 64

    def test_binary_exact(self, tmp_path):
        path = str(tmp_path / 'u.pfl')
        write_field_binary(path, self.u)
        restored = read_field_binary(path)
        assert restored.grid == self.grid
        assert np.array_equal(restored.values, self.u.values)

    def test_csv_exact(self, tmp_path):
        path = str(tmp_path / 'u.csv')
        write_field_csv(path, self.u)
        assert np.array_equal(read_field_csv(path, self.grid).values, self.u.values)

    def test_complex_csv_only(self, tmp_path):
        grid = make_grid(1, np.pi, 8)
        v = GridField(grid, np.exp(1j * grid.coordinates))
        with pytest.raises(ValueError):
            field_to_bytes(v)
        path = str(tmp_path / 'v.csv')
        write_field_csv(path, v)
        assert np.allclose(read_field_csv(path, grid).values, v.values, rtol=0, atol=1e-15)

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            field_from_bytes(b'XXXX' + field_to_bytes(self.u)[4:])


class TestJson:
    def test_non_finite_as_null(self):
        data = json.loads(to_json({'b': float('nan'), 'a': np.float64(np.inf), 'c': [np.int64(3), np.bool_(True)]}))
        assert data == {'a': None, 'b': None, 'c': [3, True]}

    def test_sorted_keys(self):
        text = to_json({'z': 1, 'a': {'y': 2, 'b': 3}})
        assert text.index('"a"') < text.index('"z"')
        assert text.index('"b"') < text.index('"y"')

    def test_enum_values(self):
        assert json.loads(to_json({'task': Task.FORWARD})) == {'task': 'FORWARD'}

    def test_atomic_write(self, tmp_path):
        path = str(tmp_path / 'nested' / 'record.json')
        write_json(path, {'value': 1})
        write_json(path, {'value': 2})
        assert read_json(path) == {'value': 2}
        assert [p.name for p in (tmp_path / 'nested').iterdir()] == ['record.json']
