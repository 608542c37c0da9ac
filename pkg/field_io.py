"""
Field Container IO
Reads and writes TorusFields and SpaceTimeFields in the flat binary container
described in FIELD_FORMAT.md, and exports samples to CSV for plotting.
"""

from typing import Union

import numpy as np
import pandas as pd

from spectral_torus import (
    SpaceTimeField,
    TorusField,
    TorusGrid,
    TorusScalarField,
    TorusSymTensorField,
    TorusVectorField,
)

MAGIC = b'TORFLD01'
HEADER_DTYPE = np.dtype([('side_length', '<f8'), ('resolution', '<i8'),
                         ('components', '<i8'), ('frames', '<i8')])
FIELD_TYPES = {1: TorusScalarField, 2: TorusVectorField, 3: TorusSymTensorField}
COMPONENT_NAMES = {1: ['f'], 2: ['v1', 'v2'], 3: ['t11', 't12', 't22']}


def _component_array(values: np.ndarray, components: int) -> np.ndarray:
    """Always (C, N, N) ordering, scalars included."""
    return values[None] if components == 1 else values


def write_field(path: str, field: Union[TorusField, SpaceTimeField]) -> None:
    """Write a single field (frames = 0) or a space-time field."""
    if isinstance(field, SpaceTimeField):
        components = field.field_type.components
        frames = len(field)
        times = field.times
        body = np.stack([_component_array(v, components) for v in field.values]) if frames else np.empty(0)
    else:
        components = field.components
        frames = 0
        times = np.empty(0)
        body = _component_array(field.values, components)

    header = np.array([(field.grid.side_length, field.grid.resolution, components, frames)],
                      dtype=HEADER_DTYPE)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(times, dtype='<f8').tobytes())
        f.write(np.ascontiguousarray(body, dtype='<f8').tobytes())


def read_field(path: str) -> Union[TorusField, SpaceTimeField]:
    with open(path, 'rb') as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a field container (magic {magic!r})")
        header = np.frombuffer(f.read(HEADER_DTYPE.itemsize), dtype=HEADER_DTYPE)[0]
        L = float(header['side_length'])
        N = int(header['resolution'])
        components = int(header['components'])
        frames = int(header['frames'])
        if components not in FIELD_TYPES:
            raise ValueError(f"{path}: unsupported component count {components}")
        times = np.frombuffer(f.read(8 * frames), dtype='<f8')
        count = max(frames, 1) * components * N * N
        body = np.frombuffer(f.read(8 * count), dtype='<f8')
        if body.size != count:
            raise ValueError(f"{path}: truncated body ({body.size} of {count} doubles)")

    grid = TorusGrid(L, N)
    kind = FIELD_TYPES[components]
    if frames == 0:
        values = body.reshape(components, N, N)
        return kind(grid, values[0] if components == 1 else values.copy())
    values = body.reshape(frames, components, N, N)
    if components == 1:
        values = values[:, 0]
    return SpaceTimeField(times.copy(), values.copy(), grid, kind)


def field_to_frame(field: TorusField, time: float = None) -> pd.DataFrame:
    """Long-format table: one row per grid point."""
    grid = field.grid
    x1, x2 = grid.coordinates
    data = {'x1': x1.ravel(), 'x2': x2.ravel()}
    values = _component_array(field.values, field.components)
    for name, comp in zip(COMPONENT_NAMES[field.components], values):
        data[name] = comp.ravel()
    df = pd.DataFrame(data)
    if time is not None:
        df.insert(0, 't', time)
    return df


def export_csv(path: str, field: Union[TorusField, SpaceTimeField]) -> None:
    if isinstance(field, SpaceTimeField):
        df = pd.concat([field_to_frame(field.frame(j), t) for j, t in enumerate(field.times)],
                       ignore_index=True)
    else:
        df = field_to_frame(field)
    df.to_csv(path, index=False, float_format='%.10e')
