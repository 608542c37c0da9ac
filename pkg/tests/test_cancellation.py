import numpy as np
import pytest

from cancellation import (
    OMEGA_CORE, OMEGA_RADIUS, build_auxiliary, build_cell, build_time_corrector, build_U, cancellation_checks,
    cell_samples, corrector_table, decay_slope, matched_radius, omega_profile, quadrature_weights,
)
from spectral_torus import SpaceTimeField, TorusGrid, TorusScalarField, divergence, lp_norm, perp_gradient
from stress_decomposition import DirectionSet, TimePartition

LAM = 16
LAMS = (16, 24, 32)
RADIUS_SCALE = 0.1


@pytest.fixture(scope='module')
def grid():
    return TorusGrid(1.0, 64)


@pytest.fixture(scope='module')
def amplitude(grid):
    x1, x2 = grid.coordinates
    return TorusScalarField(grid, 1.0 + 0.25 * np.sin(2 * np.pi * x1) * np.cos(2 * np.pi * x2))


@pytest.fixture(scope='module')
def cell(amplitude):
    return build_cell(amplitude, DirectionSet(LAM), 0, 0, TimePartition(0.1, LAM), RADIUS_SCALE / LAM ** 2)


@pytest.fixture(scope='module')
def swept(amplitude):
    return cancellation_checks(amplitude, LAMS, 0.1, np.random.default_rng(0))


def test_omega_profile_core_and_support():
    inner = np.array([[0.0, 3.0, OMEGA_CORE], [0.0, 4.0, 0.0]])
    outer = np.array([[OMEGA_RADIUS, 8.0], [0.0, 8.0]])
    assert np.all(omega_profile(inner) >= 1.0 - 1e-14)
    assert np.all(omega_profile(outer) == 0.0)


def test_auxiliary_rejects_small_lambda(grid):
    with pytest.raises(ValueError):
        build_auxiliary(grid, 4, (4, 1))


def test_auxiliary_has_unit_line_averages(grid):
    profile = build_auxiliary(grid, LAM, DirectionSet(LAM).lattice[0])
    assert profile.line_average_defect(np.random.default_rng(1), count=20) < 1e-10
    assert profile.mean_defect() < 1e-10
    assert profile.support_radius == pytest.approx(OMEGA_RADIUS / LAM)


def test_simpson_weights_integrate_cubics():
    times = np.linspace(0.0, 1.0, 11)
    weights = quadrature_weights(times)
    assert weights @ times ** 3 == pytest.approx(0.25, abs=1e-14)
    assert quadrature_weights(times, 'trapezoid') @ times == pytest.approx(0.5, abs=1e-14)
    with pytest.raises(ValueError):
        quadrature_weights(times, 'gauss')


def test_build_cell_rejects_nonpositive_radius(amplitude):
    with pytest.raises(ValueError):
        build_cell(amplitude, DirectionSet(LAM), 0, 0, TimePartition(0.1, LAM), 0.0)


def test_cell_trajectory_closes_after_one_period(cell):
    assert cell.period.count >= 1
    assert cell.eta == pytest.approx(np.sqrt(8.0 * np.pi), rel=1e-12)
    assert cell.closure_defect() < 1e-5


def test_cell_coefficient_vanishes_outside_quarter(cell):
    a, b = cell.quarter
    assert cell.coefficient(a - 1e-3) == 0.0
    assert cell.coefficient(b + 1e-3) == 0.0
    lo, hi = cell.plateau
    assert cell.squared_weight(0.5 * (lo + hi)) == pytest.approx(4.0)


def test_source_replacement_points_along_direction(grid, cell):
    profile = build_auxiliary(grid, LAM, DirectionSet(LAM).lattice[0])
    lo, _ = cell.plateau
    U = build_U(profile, cell, [cell.quarter[0] - 1e-3, lo + 1e-4])
    assert np.all(U.values[0] == 0.0)
    frame = U.values[1]
    xi = cell.direction
    np.testing.assert_allclose(frame[0] * xi[1] - frame[1] * xi[0], 0.0, atol=1e-12 * np.max(np.abs(frame)))


def test_cancellation_sweep(swept):
    sweep, checks = swept
    assert list(sweep['lambda']) == [16.0, 24.0, 32.0]
    assert sweep['periods'].min() >= 1
    assert sweep['closure_defect'].max() < 1e-8
    assert sweep['identity_residual'].max() <= 1e-8
    assert np.all(sweep['G_l1'] > 0.0)
    assert checks['passed'].all()


def test_cancellation_error_decays_like_inverse_lambda(swept):
    sweep, _ = swept
    assert decay_slope(sweep) == pytest.approx(-1.0, abs=0.15)


def test_matched_radius_gives_whole_periods(amplitude):
    scaled = []
    for lam in (16, 32):
        directions, partition = DirectionSet(lam), TimePartition(0.1, lam)
        r_next = matched_radius(amplitude, directions, 0, partition)
        info = build_cell(amplitude, directions, 0, 0, partition, r_next).period
        assert info.count == lam // 4 - 2
        assert info.window < 1e-9 * info.plateau_length
        assert info.period == pytest.approx(partition.ramp_width, rel=1e-9)
        scaled.append(r_next * lam ** 2)
    assert scaled[0] == pytest.approx(scaled[1], rel=1e-2)


def test_cell_samples_bound_the_block_displacement(cell):
    step = 1.0 / 128
    times = cell_samples(cell, max_displacement=step)
    assert times.size % 2 == 1
    assert times[0] == cell.quarter[0] and times[-1] == cell.quarter[1]
    top_speed = cell.eta / (2.0 * np.pi) / cell.r.inf
    assert top_speed * (times[1] - times[0]) <= step
    assert cell_samples(cell).size < times.size


def test_time_corrector_of_oscillation(grid):
    partition = TimePartition(0.1, 8)
    times = np.linspace(0.0, 0.1, 201)
    x1, _ = grid.coordinates
    v = perp_gradient(TorusScalarField(grid, np.sin(2 * np.pi * x1)))
    U = SpaceTimeField.from_frames(times, [v * float(np.sin(2 * np.pi * t / 0.1)) for t in times])
    corrector = build_time_corrector(U, partition)

    assert lp_norm(corrector.averaged.frame(0), np.inf) < 1e-12
    # -Q(t) = int_0^t sin(2 pi s / tau) ds v
    expected = -(0.1 / np.pi) * v.values
    np.testing.assert_allclose(corrector.field.values[100], expected, atol=1e-3 * np.max(np.abs(expected)))
    table = corrector_table(corrector, partition)
    assert table['boundary'].iloc[0] and table['boundary'].iloc[-1]
    assert table.loc[table['boundary'], 'q_max'].max() < 1e-12
    assert table['divergence_max'].max() < 1e-10
    assert lp_norm(divergence(corrector.rate.frame(50)), np.inf) < 1e-10
