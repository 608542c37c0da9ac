import numpy as np
import pytest

from moving_block import (
    MAX_SCALE, ScaleFunction, TimeCutoff, assemble_block, block_residual, rotation, solve_trajectory, time_refinement,
    toy_block, verify_block,
)
from spectral_torus import TorusGrid, TorusScalarField


@pytest.fixture(scope='module')
def grid():
    return TorusGrid(1.0, 64)


@pytest.fixture(scope='module')
def block(grid):
    return toy_block(grid, 0.05, 4.0 * grid.spacing, 0.5)


@pytest.mark.parametrize('value', [-0.01, 0.0, MAX_SCALE])
def test_scale_function_bounds(grid, value):
    with pytest.raises(ValueError):
        ScaleFunction.constant(grid, value)


def test_scale_function_interpolation(grid):
    x1, x2 = grid.coordinates
    field = TorusScalarField(grid, 0.05 + 0.01 * np.sin(2 * np.pi * x1))
    spectral = ScaleFunction(field)
    bilinear = ScaleFunction(field, 'bilinear')
    point = (0.3, 0.7)
    assert spectral.at(point) == pytest.approx(0.05 + 0.01 * np.sin(0.6 * np.pi), abs=1e-12)
    assert bilinear.at(point) == pytest.approx(spectral.at(point), abs=1e-4)
    np.testing.assert_allclose(spectral.gradient_at(point), [0.02 * np.pi * np.cos(0.6 * np.pi), 0.0], atol=1e-10)
    with pytest.raises(ValueError):
        ScaleFunction(field, 'cubic')


def test_time_cutoff_support():
    with pytest.raises(ValueError):
        TimeCutoff.constant(-1.0)
    eta = TimeCutoff.constant(2.0, (0.0, 1.0))
    assert eta(0.5) == 2.0
    assert eta(1.5) == 0.0
    assert eta.rate(0.5) == 0.0
    assert eta.scaled(0.5)(0.5) == 1.0


def test_rotation_takes_e1_to_direction():
    K = rotation((3.0, 4.0))
    np.testing.assert_allclose(K @ [1.0, 0.0], [0.6, 0.8])
    np.testing.assert_allclose(K.T @ K, np.eye(2), atol=1e-15)


def test_constant_speed_trajectory(grid):
    r = ScaleFunction.constant(grid, 0.05)
    eta = TimeCutoff.constant(1.0)
    xi = np.array([0.6, 0.8])
    trajectory = solve_trajectory(r, eta, xi, 0.0, (0.5, 0.5), (-0.01, 0.01))
    np.testing.assert_allclose(trajectory.unwrapped(0.01), [0.5, 0.5] + 0.2 * xi, atol=1e-8)
    np.testing.assert_allclose(trajectory.unwrapped(-0.01), [0.5, 0.5] - 0.2 * xi, atol=1e-8)
    assert trajectory.wrapped_distance(0.0, (0.5, 0.5)) == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.diff(trajectory.times) >= 0)


def test_trajectory_rejects_non_unit_direction(grid):
    with pytest.raises(ValueError):
        solve_trajectory(ScaleFunction.constant(grid, 0.05), TimeCutoff.constant(1.0), (1.0, 1.0), 0.0,
                         (0.0, 0.0), (0.0, 0.1))


def test_block_frame_outside_cutoff_is_quiet(block):
    a, _ = block.eta.support
    frame = block.frame(a - 0.01)
    assert np.all(frame.velocity.values == 0.0)
    assert np.all(frame.stress.values == 0.0)
    assert frame.source_rate == 0.0


def test_speed_rate_follows_chain_rule(block):
    a, b = block.eta.support
    t = 0.5 * (a + b)
    center = block.trajectory.position(t)
    r = block.r.at(center)
    r_prime, rate = block.speed_rate(t)
    assert r_prime == pytest.approx(block.eta(t) * block.r.gradient_at(center)[0] / r)
    assert rate == pytest.approx(block.eta.rate(t) * r + block.eta(t) * r_prime)


def test_assembled_block_satisfies_momentum_balance(block):
    a, b = block.eta.support
    fields = assemble_block(block, np.linspace(a, b, 4)[1:-1])
    residual = block_residual(fields)
    assert list(residual.columns) == [
        'time', 'residual_l2', 'relative_residual', 'scale', 'mean_defect', 'divergence_max',
        'source_integral_1', 'source_integral_2', 'source_exterior', 'sampling_defect',
    ]
    assert residual['relative_residual'].max() <= 1e-5
    assert residual['divergence_max'].max() < 1e-10
    assert np.all(fields.radii < MAX_SCALE)


def test_source_has_unit_momentum_and_stays_on_the_block(block):
    a, b = block.eta.support
    residual = block_residual(assemble_block(block, np.linspace(a, b, 4)[1:-1]))
    # trapezoid error of the C^{1,1} core at N = 64
    np.testing.assert_allclose(residual['source_integral_1'], 2.0 * np.pi, rtol=2e-2)
    np.testing.assert_allclose(residual['source_integral_2'], 0.0, atol=2e-2 * 2.0 * np.pi)
    assert residual['source_exterior'].max() < 1e-12


def test_time_differencing_converges(block):
    a, b = block.eta.support
    times = np.linspace(a, b, 6)[1:-1]
    base = 0.05 * min(block.time_scale_at(float(t)) for t in times)
    table = time_refinement(block, times, base, halvings=2)
    np.testing.assert_allclose(table['step'], [base, base / 2, base / 4])
    assert table['relative_residual'].iloc[-1] <= 0.25 * table['relative_residual'].iloc[0]


def test_verify_block_tables(block):
    residual, norms, checks = verify_block(block, samples=2, source_tol=2e-2)
    assert len(residual) == 2
    assert set(norms['quantity']) == {'F', 'V', 'DV', 'dtV', 'S'}
    assert np.all(np.isfinite(norms['ratio']))
    assert set(checks['check']) == {
        'relative_residual', 'divergence_max', 'max_block_radius', 'source_integral', 'source_support',
        'time_refinement_decay',
    }
    assert checks['passed'].all()
