from __future__ import annotations
import hashlib
import json
import math
import os
import struct
import tempfile
from enum import Enum
import numpy as np
import pandas as pd
from src.lattice import *

FIELD_MAGIC: bytes = b'PFL1'
CSV_FLOAT_FORMAT: str = '%.17g'
AXIS_NAMES: tuple[str, ...] = ('x', 'y')


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """
    Write-then-rename: the target either keeps its old content or receives the complete payload.
    """
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    handle, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=folder)
    try:
        with os.fdopen(handle, 'wb') as file:
            file.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode('utf-8'))


def _json_safe(value: any) -> any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {(k.value if isinstance(k, Enum) else str(k)): _json_safe(v) for k, v in value.items()}
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def to_json(data: dict[str, any]) -> str:
    return json.dumps(_json_safe(data), sort_keys=True, indent=2) + '\n'


def write_json(path: str, data: dict[str, any]) -> None:
    atomic_write_text(path, to_json(data))


def read_json(path: str) -> dict[str, any]:
    with open(path, 'r', encoding='utf-8') as file:
        return json.load(file)


def file_digest(path: str) -> str:
    with open(path, 'rb') as file:
        return hashlib.sha256(file.read()).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def field_to_bytes(u: GridField) -> bytes:
    if not u.is_real:
        raise ValueError('Binary field records hold real values only; write complex fields as CSV')
    grid = u.grid
    header = FIELD_MAGIC + struct.pack('<I', grid.dim) + struct.pack(f'<{grid.dim}I', *grid.shape)
    header += struct.pack('<d', grid.extent)
    return header + u.values.astype('<f8').tobytes(order='C')


def field_from_bytes(payload: bytes) -> GridField:
    if payload[:4] != FIELD_MAGIC:
        raise ValueError(f'Not a field record: magic {payload[:4]!r}')
    dim = struct.unpack_from('<I', payload, 4)[0]
    shape = struct.unpack_from(f'<{dim}I', payload, 8)
    offset = 8 + 4 * dim
    extent = struct.unpack_from('<d', payload, offset)[0]
    if len(set(shape)) != 1:
        raise ValueError(f'Field record has unequal axis sizes {shape}')
    grid = make_grid(dim, extent, shape[0])
    values = np.frombuffer(payload, dtype='<f8', offset=offset + 8)
    return GridField(grid, values.reshape(grid.shape))


def write_field_binary(path: str, u: GridField) -> None:
    atomic_write_bytes(path, field_to_bytes(u))


def read_field_binary(path: str) -> GridField:
    with open(path, 'rb') as file:
        return field_from_bytes(file.read())


def field_frame(u: GridField) -> pd.DataFrame:
    data = {AXIS_NAMES[axis]: u.grid.mesh[axis].reshape(-1) for axis in range(u.grid.dim)}
    if u.is_real:
        data['value'] = u.flat
    else:
        data['real'] = u.flat.real
        data['imag'] = u.flat.imag
    return pd.DataFrame(data)


def frame_to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator='\n')


def write_field_csv(path: str, u: GridField) -> None:
    atomic_write_text(path, frame_to_csv(field_frame(u)))


def read_field_csv(path: str, grid: Grid) -> GridField:
    data = pd.read_csv(path, header=0, dtype=float)
    if 'value' in data.columns:
        values = np.array(data['value'], dtype='float64')
    else:
        values = np.array(data['real'], dtype='float64') + 1j * np.array(data['imag'], dtype='float64')
    return GridField(grid, values)


def region_frame(r: Region) -> pd.DataFrame:
    data = {'node': r.nodes}
    for axis in range(r.grid.dim):
        data[AXIS_NAMES[axis]] = r.grid.mesh[axis].reshape(-1)[r.nodes]
    return pd.DataFrame(data)


def write_region_csv(path: str, r: Region) -> None:
    atomic_write_text(path, frame_to_csv(region_frame(r)))


def read_region_csv(path: str, grid: Grid, kind: RegionKind) -> Region:
    data = pd.read_csv(path, header=0)
    mask = np.zeros(grid.size, dtype=bool)
    mask[np.array(data['node'], dtype=int)] = True
    return Region(grid, mask, kind)


def dump_matrix_csv(path: str, matrix: np.ndarray) -> None:
    atomic_write_text(path, frame_to_csv(pd.DataFrame(np.asarray(matrix))))


def partial_bell(n: int, k: int, xs: list[np.ndarray]) -> np.ndarray:
    """
    Partial Bell polynomial B_{n,k}(x_1, ..., x_{n-k+1}) evaluated nodewise.
    :param xs: xs[j] holds x_{j+1}; at least n-k+1 entries are needed.
    """
    if k == 0:
        return np.ones_like(xs[0]) if n == 0 else np.zeros_like(xs[0])
    if n == 0 or k > n:
        return np.zeros_like(xs[0])
    # B_{n,k} = sum_{i=1}^{n-k+1} C(n-1, i-1) x_i B_{n-i,k-1}
    total = np.zeros_like(xs[0])
    for i in range(1, n - k + 2):
        total = total + math.comb(n - 1, i - 1) * xs[i - 1] * partial_bell(n - i, k - 1, xs)
    return total


def fit_slope(xs: list[float], ys: list[float]) -> float:
    """
    Least-squares slope of log(y) against log(x).
    """
    slope, _ = np.polyfit(np.log(np.asarray(xs, dtype='float64')), np.log(np.asarray(ys, dtype='float64')), 1)
    return float(slope)
