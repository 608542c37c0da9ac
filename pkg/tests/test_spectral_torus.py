import numpy as np
import pytest

from spectral_torus import (
    MeanError, ResolutionError, SpaceTimeField, TorusGrid, TorusScalarField, TorusSymTensorField,
    TorusVectorField, curl2d, divergence, evaluate_spectral, gradient, inverse_laplacian, laplacian,
    leray_project, lp_norm, mollify, mollify_space, perp_gradient, remove_mean, sample, shift,
    symmetric_product, tensor_divergence, tensor_square, time_derivative,
)


@pytest.fixture(scope='module')
def grid():
    return TorusGrid(1.0, 32)


def _wave(grid, m1=1, m2=2):
    x1, x2 = grid.coordinates
    return TorusScalarField(grid, np.sin(2 * np.pi * (m1 * x1 + m2 * x2)))


@pytest.mark.parametrize('resolution', [7, 6, 33])
def test_grid_rejects_odd_or_tiny_resolution(resolution):
    with pytest.raises(ValueError):
        TorusGrid(1.0, resolution)


def test_gradient_of_plane_wave(grid):
    f = _wave(grid)
    x1, x2 = grid.coordinates
    phase = 2 * np.pi * (x1 + 2 * x2)
    g = gradient(f)
    np.testing.assert_allclose(g.values[0], 2 * np.pi * np.cos(phase), atol=1e-10)
    np.testing.assert_allclose(g.values[1], 4 * np.pi * np.cos(phase), atol=1e-10)


def test_perp_gradient_is_divergence_free(grid):
    v = perp_gradient(_wave(grid, 3, -1))
    assert lp_norm(divergence(v), np.inf) < 1e-10


def test_curl_of_gradient_vanishes(grid):
    assert lp_norm(curl2d(gradient(_wave(grid, 2, 5))), np.inf) < 1e-10


def test_inverse_laplacian_round_trip(grid):
    f = _wave(grid, 2, 1) + _wave(grid, -1, 3) * 0.5
    np.testing.assert_allclose(laplacian(inverse_laplacian(f)).values, f.values, atol=1e-10)


def test_inverse_laplacian_requires_mean_zero(grid):
    f = TorusScalarField(grid, np.ones((32, 32)))
    with pytest.raises(MeanError):
        inverse_laplacian(f)


def test_leray_projection(grid):
    f = _wave(grid, 1, 1)
    assert lp_norm(leray_project(gradient(f)), np.inf) < 1e-10
    v = perp_gradient(f)
    np.testing.assert_allclose(leray_project(v).values, v.values, atol=1e-12)


def test_shift_by_grid_cells_matches_roll(grid):
    f = _wave(grid, 2, 3)
    moved = shift(f, (3 * grid.spacing, -2 * grid.spacing))
    np.testing.assert_allclose(moved.values, np.roll(f.values, (3, -2), axis=(0, 1)), atol=1e-12)


def test_evaluate_spectral_reproduces_samples(grid):
    f = _wave(grid, 1, -2)
    points = grid.coordinates.reshape(2, -1)[:, ::37]
    np.testing.assert_allclose(evaluate_spectral(f, points), f.values.reshape(-1)[::37], atol=1e-12)


def test_lp_norm_of_constant(grid):
    one = TorusScalarField(grid, np.ones((32, 32)))
    for p in (1.0, 1.5, 2.0, np.inf):
        assert lp_norm(one, p) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        lp_norm(one, 0.5)


def test_products_without_mask(grid):
    x1, x2 = grid.coordinates
    v = TorusVectorField(grid, np.stack([np.sin(2 * np.pi * x1), np.cos(2 * np.pi * x2)]))
    w = TorusVectorField(grid, np.stack([x1 * 0 + 1.0, np.sin(2 * np.pi * x2)]))
    sym = symmetric_product(v, w, use_mask=False).values
    np.testing.assert_allclose(sym[1], v.values[0] * w.values[1] + v.values[1] * w.values[0])
    sq = tensor_square(v, use_mask=False).values
    np.testing.assert_allclose(sq[0], v.values[0] ** 2)


def test_tensor_divergence_of_identity_multiple(grid):
    f = _wave(grid, 1, 2)
    T = TorusSymTensorField.identity(f)
    np.testing.assert_allclose(tensor_divergence(T).values, gradient(f).values, atol=1e-10)


def test_mollifier_keeps_mean_and_rejects_small_scales(grid):
    f = TorusScalarField(grid, 2.0 + _wave(grid).values)
    assert float(mollify_space(f, 0.1).mean()) == pytest.approx(2.0)
    with pytest.raises(ResolutionError):
        mollify_space(f, grid.spacing)


def test_mollify_space_time_valid_mode(grid):
    times = np.linspace(0.0, 1.0, 21)
    frames = [_wave(grid) * t for t in times]
    F = SpaceTimeField.from_frames(times, frames)
    smoothed = mollify(F, 0.1, time_radius=0.17)
    assert len(smoothed) == 21 - 2 * 3
    assert smoothed.times[0] == pytest.approx(0.15)


def test_time_derivative_of_linear_series(grid):
    times = np.linspace(0.0, 1.0, 9)
    f = _wave(grid)
    F = SpaceTimeField.from_frames(times, [f * (1.0 + 3.0 * t) for t in times])
    dF = time_derivative(F)
    assert len(dF) == 5
    np.testing.assert_allclose(dF.values, np.broadcast_to(3.0 * f.values, dF.values.shape), atol=1e-10)


def test_space_time_field_requires_increasing_times(grid):
    f = _wave(grid)
    with pytest.raises(ValueError):
        SpaceTimeField.from_frames([0.0, 0.0], [f, f])


def test_sample_periodizes_wide_supports():
    grid = TorusGrid(1.0, 16)
    field_ = sample(grid, lambda d: np.ones(d.shape[1:]), TorusScalarField, (0.0, 0.0), 0.6)
    np.testing.assert_allclose(field_.values, 9.0)


def test_remove_mean(grid):
    v = TorusVectorField(grid, np.stack([np.full((32, 32), 3.0), _wave(grid).values]))
    np.testing.assert_allclose(remove_mean(v).mean(), 0.0, atol=1e-14)
