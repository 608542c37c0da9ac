import numpy as np
import pandas as pd
import pytest

from field_io import MAGIC, export_csv, read_field, write_field
from spectral_torus import SpaceTimeField, TorusGrid, TorusScalarField, TorusSymTensorField, TorusVectorField


@pytest.fixture
def grid():
    return TorusGrid(2.0, 8)


def test_scalar_snapshot(tmp_path, grid):
    f = TorusScalarField(grid, np.arange(64.0).reshape(8, 8))
    path = str(tmp_path / 'f.field')
    write_field(path, f)
    back = read_field(path)
    assert isinstance(back, TorusScalarField)
    assert back.grid == grid
    np.testing.assert_array_equal(back.values, f.values)


def test_space_time_tensor_snapshot(tmp_path, grid):
    rng = np.random.default_rng(0)
    frames = [TorusSymTensorField(grid, rng.normal(size=(3, 8, 8))) for _ in range(3)]
    series = SpaceTimeField.from_frames([0.0, 0.5, 1.0], frames)
    path = str(tmp_path / 'R.field')
    write_field(path, series)
    back = read_field(path)
    assert back.field_type is TorusSymTensorField
    np.testing.assert_array_equal(back.times, series.times)
    np.testing.assert_array_equal(back.values, series.values)


def test_header_layout(tmp_path, grid):
    path = tmp_path / 'v.field'
    write_field(str(path), TorusVectorField.zeros(grid))
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    assert np.frombuffer(raw[8:16], '<f8')[0] == 2.0
    assert np.frombuffer(raw[16:40], '<i8').tolist() == [8, 2, 0]
    assert len(raw) == 40 + 8 * 2 * 64


def test_rejects_foreign_and_truncated_files(tmp_path, grid):
    foreign = tmp_path / 'x.field'
    foreign.write_bytes(b'NOTAFILE' + bytes(32))
    with pytest.raises(ValueError):
        read_field(str(foreign))
    path = tmp_path / 'cut.field'
    write_field(str(path), TorusVectorField.zeros(grid))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_field(str(path))


def test_csv_export_long_format(tmp_path, grid):
    frames = [TorusVectorField(grid, np.full((2, 8, 8), t)) for t in (0.0, 1.0)]
    path = str(tmp_path / 'v.csv')
    export_csv(path, SpaceTimeField.from_frames([0.0, 1.0], frames))
    df = pd.read_csv(path)
    assert list(df.columns) == ['t', 'x1', 'x2', 'v1', 'v2']
    assert len(df) == 2 * 64
    assert df.loc[df['t'] == 1.0, 'v2'].eq(1.0).all()
