import numpy as np
import pytest

from spectral_torus import ResolutionError, SpaceTimeField, TorusGrid, TorusScalarField, evaluate_spectral
from stress_decomposition import (
    DirectionSet, TimePartition, build_directions, build_partition, decompose_field,
    decompose_matrix, decomposition_report, period_bookkeeping, ramp, reconstruct, select_amplitude_and_start,
    time_average, trajectory_ratio, verify_stress_decomposition, _random_stress,
)


@pytest.fixture(scope='module')
def unit_grid():
    return TorusGrid(1.0, 32)


@pytest.mark.parametrize('lam', [6, 7, 8.5])
def test_directions_reject_bad_lambda(lam):
    with pytest.raises(ValueError):
        DirectionSet(lam)


def test_directions_follow_lattice():
    directions = build_directions(16)
    assert directions.lattice_defect() < 1e-14
    np.testing.assert_allclose(np.hypot(*directions.vectors.T), 1.0, atol=1e-15)
    assert directions.line_length(0) == pytest.approx(np.sqrt(257.0))
    np.testing.assert_allclose(directions.periods * 16, np.hypot(*directions.lattice.T.astype(float)))


def test_odd_lambda_reduces_diagonal_lattice():
    directions = build_directions(9)
    np.testing.assert_array_equal(directions.lattice, [[9, 1], [-1, 9], [4, 5], [5, -4]])
    assert directions.lattice_defect() < 1e-14
    assert directions.line_length(2) == pytest.approx(np.sqrt(41.0))
    assert directions.periods[2] == pytest.approx(np.sqrt(1.0 + 1.0 / 81.0) / np.sqrt(2.0))


def test_odd_lambda_start_point():
    grid = TorusGrid(1.0, 64)
    x1, x2 = grid.coordinates
    a = TorusScalarField(grid, 1.0 + 0.5 * np.cos(2 * np.pi * (-5 * x1 + 4 * x2)))
    choice = select_amplitude_and_start(a, build_directions(9), 2)
    assert choice.line_defect < 1e-8
    assert evaluate_spectral(a, choice.x0.reshape(2, 1))[0] == pytest.approx(1.0, abs=1e-8)


def test_decompose_matrix_identity_and_floor():
    rng = np.random.default_rng(0)
    directions = build_directions(16)
    delta = 0.5
    R = rng.normal(size=(3, 500)) * 10.0 ** rng.uniform(-2, 2, 500)
    a, sigma = decompose_matrix(R, directions, delta)
    target = -R + np.stack([sigma, np.zeros_like(sigma), sigma])
    np.testing.assert_allclose(reconstruct(a, directions), target, atol=1e-12 * np.max(sigma))
    assert np.min(a) >= 4.0 * delta


def test_decompose_matrix_accepts_full_matrix():
    directions = build_directions(8)
    R = np.array([[0.3, -0.2], [-0.2, 0.1]])
    a_full, s_full = decompose_matrix(R, directions, 1.0)
    a_comp, s_comp = decompose_matrix(np.array([0.3, -0.2, 0.1]), directions, 1.0)
    np.testing.assert_allclose(a_full, a_comp)
    assert s_full == pytest.approx(s_comp)


def test_decompose_matrix_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        decompose_matrix(np.zeros(3), build_directions(8), 0.0)


def test_decompose_field_requires_tensor(unit_grid):
    scalar = SpaceTimeField.from_frames([0.0, 1.0], [TorusScalarField.zeros(unit_grid)] * 2)
    with pytest.raises(TypeError):
        decompose_field(scalar, build_directions(8), 1.0)


def test_decomposition_report_bounds(unit_grid):
    rng = np.random.default_rng(1)
    delta = 0.2
    times = [0.0, 0.5]
    R = SpaceTimeField.from_frames(times, [_random_stress(rng, unit_grid, 2.0 * delta) for _ in times])
    report = decomposition_report(R, decompose_field(R, build_directions(16), delta))
    assert report['min_a_over_delta'].min() >= 4.0
    assert report['max_a_l1_over_delta'].max() <= 192.0
    assert report['reconstruction_residual'].max() < 1e-12
    assert report['divergence_identity'].max() < 1e-10


def test_verify_stress_decomposition_passes(unit_grid):
    checks = verify_stress_decomposition(np.random.default_rng(2), unit_grid, samples=2000)
    assert checks['passed'].all(), checks.to_string()


def test_ramp_endpoints():
    values, rates = ramp(np.array([0.1, 0.15, 0.2]), 0.1, 0.1)
    assert values[0] == 0.0
    assert values[2] == pytest.approx(1.0)
    assert 0.0 < values[1] < 1.0
    assert rates[1] > 0.0


@pytest.mark.parametrize('tau', [0.3, 0.2])
def test_partition_rejects_bad_tau(tau):
    with pytest.raises(ValueError):
        TimePartition(tau, 16)


def test_partition_cutoffs():
    partition = build_partition(0.1, 16)
    lo, hi = partition.plateau(1, 0)
    t = np.linspace(lo, hi, 11)
    np.testing.assert_allclose(partition.cutoff(1, 0, t), 1.0, atol=1e-14)
    a, b = partition.quarter(1, 0)
    assert partition.cutoff(1, 0, a - 1e-3) == 0.0
    assert partition.cutoff(1, 0, b + 1e-3) == 0.0
    assert partition.active(0.5 * (lo + hi)) == (1, 0)
    assert partition.active(a) is None
    assert partition.ramp_width == pytest.approx(0.1 / 16)


def test_time_average_is_piecewise_constant():
    partition = build_partition(0.1, 8)
    times = np.linspace(0.0, 0.2, 41)
    _, averaged = time_average((times, times.copy()), partition)
    np.testing.assert_allclose(averaged[:20], 0.05, atol=1e-14)
    np.testing.assert_allclose(averaged[20:], 0.15, atol=1e-14)


def test_samples_ending_on_partition_point_stay_in_their_interval():
    partition = build_partition(1.0 / 16.0, 16)
    times = np.linspace(6.0 / 16.0, 7.0 / 16.0, 33)
    assert partition.interval_range(times) == (6, 6)
    assert partition.interval_range(np.linspace(0.0, 0.2, 41)) == (0, 3)
    _, averaged = time_average((times, 3.0 * np.ones_like(times)), partition)
    np.testing.assert_allclose(averaged, 3.0, rtol=1e-14)


def test_time_average_requires_full_interval():
    partition = build_partition(0.1, 8)
    times = np.linspace(0.02, 0.1, 5)
    with pytest.raises(ResolutionError):
        time_average((times, times), partition)


def test_constant_amplitude_choice(unit_grid):
    a = TorusScalarField(unit_grid, np.full((32, 32), 2.0))
    choice = select_amplitude_and_start(a, build_directions(16), 0)
    assert choice.eta == pytest.approx(np.sqrt(16.0 * np.pi))
    assert choice.normalized_square == pytest.approx(8.0)
    assert choice.line_defect == pytest.approx(0.0, abs=1e-12)


def test_start_point_matches_torus_mean():
    grid = TorusGrid(1.0, 64)
    x1, x2 = grid.coordinates
    a = TorusScalarField(grid, 1.0 + 0.5 * np.cos(2 * np.pi * (-x1 + 16 * x2)))
    choice = select_amplitude_and_start(a, build_directions(16), 0)
    assert choice.line_defect < 1e-8
    # the surviving mode is constant along the line, so a(x0) is the line average
    assert evaluate_spectral(a, choice.x0.reshape(2, 1))[0] == pytest.approx(1.0, abs=1e-8)


def test_period_bookkeeping_window():
    directions = build_directions(16)
    partition = build_partition(0.1, 16)
    info = period_bookkeeping(directions, 0, 1e-3, 2.0, partition)
    assert info.period == pytest.approx(np.sqrt(257.0) * 1e-3 * 2.0 / 4.0)
    assert info.plateau_length == pytest.approx(0.025 - 2 * 0.1 / 16)
    assert info.count == int(np.floor(info.plateau_length / info.period))
    assert info.window_ok


def test_period_bookkeeping_checks_trajectory_assumption():
    directions = build_directions(16)
    partition = build_partition(0.1, 16)
    with pytest.raises(ResolutionError, match=r'r delta\^\(1/2\) <= tau/200'):
        period_bookkeeping(directions, 0, 1e-3, 2.0, partition, delta=1.0)
    info = period_bookkeeping(directions, 0, 1e-8, 2.0, partition, delta=1.0)
    assert info.trajectory_ratio == pytest.approx(256 * 1e-8 * 200 / 0.1)
    assert trajectory_ratio(16, 1e-8, 1.0, 0.1, improved=True) == pytest.approx(64 * 1e-8 * 200 / 0.1)
