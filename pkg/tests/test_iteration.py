from fractions import Fraction

import numpy as np
import pytest

import iteration
from config import PAPER_EXPONENTS, RESIDUAL_TOL, TOY_EXPONENTS
from iteration import (
    ConstructionError, ParameterSchedule, StageState, ToyOverrides, assemble_stage, boundary_deltas, cell_times,
    check_constraints, constraint_lines, diagnostics, stage0_endpoints, stage0_shear, stage_checks, stage_residual,
    start_cutoff,
)
from moving_block import TrajectoryError
from spectral_torus import (
    MeanError, ResolutionError, TorusGrid, TorusScalarField, TorusSymTensorField, TorusVectorField, gradient,
    mollify, perp_gradient,
)

CELL = 5


@pytest.fixture(scope='module')
def grid():
    return TorusGrid(1.0, 32)


@pytest.fixture(scope='module')
def toy():
    return ParameterSchedule.toy()


@pytest.fixture(scope='module')
def stage0(toy, grid):
    return stage0_shear(toy, grid, cell_times(toy, 0, CELL, 32))


@pytest.fixture(scope='module')
def assembled(toy, grid, stage0):
    overrides = ToyOverrides(delta_next=1.0, block_radius=0.05, block_alpha=0.5, smoothing_ell=4.0 * grid.spacing)
    return assemble_stage(stage0, toy, overrides, CELL)


def _stream(grid, m1, m2):
    x1, x2 = grid.coordinates
    return TorusScalarField(grid, np.sin(2 * np.pi * m1 * x1) * np.sin(2 * np.pi * m2 * x2))


# ---------------------------------------------------------------------------
# Schedule and constraints
# ---------------------------------------------------------------------------

def test_toy_schedule_values(toy):
    assert toy.frequency(0) == 4
    assert toy.frequency(1) == 16
    assert toy.tau(1) == pytest.approx(1.0 / 16.0)
    assert toy.radius(1) == pytest.approx(16.0 ** -1.2)


def test_paper_frequencies_are_exact():
    paper = ParameterSchedule.paper()
    assert paper.frequency(1) == 2 ** 110
    table = paper.table(3)
    assert len(table) == 4
    assert table['lambda'].iloc[3].startswith('10^')


@pytest.mark.parametrize('kwargs', [
    {'lambda0': 1, 'exponents': dict(TOY_EXPONENTS)},
    {'lambda0': 4, 'exponents': {**TOY_EXPONENTS, 'sigma': Fraction(3, 2)}},
    {'lambda0': 4, 'exponents': {'beta': Fraction(1, 245)}},
    {'lambda0': 4, 'exponents': dict(TOY_EXPONENTS), 'mode': 'huge'},
])
def test_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        ParameterSchedule(**kwargs)


def test_paper_constraints_hold():
    table = check_constraints(ParameterSchedule.paper())
    assert len(table) == 11
    assert table['passed'].all()
    margins = dict(zip(table['constraint'], table['margin']))
    assert margins['2beta + 3mu < n'] == '9/98'
    assert Fraction(margins['mu - beta - 2 - kappa > 0']) == Fraction(29, 98)


def test_zero_mu_breaks_constraints():
    schedule = ParameterSchedule(2, {**PAPER_EXPONENTS, 'mu': Fraction(0)}, 'paper')
    table = check_constraints(schedule)
    assert not table['passed'].all()
    assert not table.loc[table['constraint'] == '5 + 2n/sigma + 2beta - mu < 0', 'passed'].iloc[0]


def test_improved_schedule_swaps_trajectory_constraint():
    table = check_constraints(ParameterSchedule.paper(improved=True))
    assert table['constraint'].iloc[1] == 'mu - beta - 3/2 - kappa > 0'
    assert table['passed'].iloc[1]
    lines = constraint_lines(ParameterSchedule.paper(improved=True))
    assert 'improved' in lines[0]


# ---------------------------------------------------------------------------
# Stage 0
# ---------------------------------------------------------------------------

def test_start_cutoff_shape():
    value, rate = start_cutoff(np.array([0.0, 0.25, 0.5, 1.0]))
    np.testing.assert_allclose(value, [1.0, 1.0, 0.0, 0.0])
    assert np.all(rate <= 0.0)


def test_shear_solves_euler_reynolds(stage0):
    residual = stage_residual(stage0)
    assert residual['relative_residual'].max() < 1e-10
    assert residual['divergence_max'].max() < 1e-10
    assert stage_checks(stage0, residual)['passed'].all()
    assert stage0.info['cutoff_rate_max'] > 0.0


def test_shear_needs_resolved_frequency(toy):
    with pytest.raises(ResolutionError):
        stage0_shear(toy, TorusGrid(1.0, 8), [0.0, 0.1])


def test_endpoints_interpolate_mollified_fields():
    grid = TorusGrid(1.0, 64)
    u_start = perp_gradient(_stream(grid, 1, 1))
    u_end = perp_gradient(_stream(grid, 1, 2))
    times = np.linspace(0.0, 1.0, 9)
    state = stage0_endpoints(u_start, u_end, 2.0, times)
    assert state.info['start_distance'] <= 1.0
    residual = stage_residual(state)
    assert residual['relative_residual'].max() < 1e-10
    assert residual['divergence_max'].max() < 1e-10
    ell = state.info['ell']
    np.testing.assert_allclose(state.velocity.values[0], mollify(u_start, ell).values, atol=1e-12)
    np.testing.assert_allclose(state.velocity.values[-1], mollify(u_end, ell).values, atol=1e-12)


def test_endpoints_reject_bad_inputs():
    grid = TorusGrid(1.0, 64)
    good = perp_gradient(_stream(grid, 1, 1))
    compressible = gradient(_stream(grid, 1, 1))
    with pytest.raises(ValueError):
        stage0_endpoints(good, compressible, 2.0, [0.0, 1.0])
    shifted = TorusVectorField(grid, good.values + 1.0)
    with pytest.raises(MeanError):
        stage0_endpoints(shifted, good, 2.0, [0.0, 1.0])


def test_stage_state_types(stage0):
    with pytest.raises(TypeError):
        StageState(0, stage0.pressure, stage0.velocity_rate, stage0.pressure, stage0.stress)


# ---------------------------------------------------------------------------
# Stage map
# ---------------------------------------------------------------------------

def test_assemble_requires_interval_samples(toy, grid):
    state = stage0_shear(toy, grid, cell_times(toy, 0, CELL - 1, 8))
    overrides = ToyOverrides(delta_next=1.0, block_radius=0.05, block_alpha=0.5, smoothing_ell=4.0 * grid.spacing)
    with pytest.raises(ValueError):
        assemble_stage(state, toy, overrides, CELL)


def test_assembled_stage_structure(assembled, stage0):
    state, parts = assembled
    assert state.q == 1
    assert state.stress.field_type is TorusSymTensorField
    assert len(parts.cells) == 4
    assert set(parts.stress_parts) == {'temporal', 'cancellation', 'source', 'blocks', 'linear', 'corrector'}
    assert parts.mean_defects.shape == (len(stage0.times), 4)
    assert state.info['lambda'] == 16.0


def test_assembled_stage_satisfies_euler_reynolds(assembled):
    state, _ = assembled
    residual = stage_residual(state)
    assert residual['relative_residual'].max() <= RESIDUAL_TOL
    scale = max(np.max(np.abs(state.velocity.values)), 1.0)
    assert residual['divergence_max'].max() / scale < 1e-8


def test_assembled_stage_anchors_at_interval_ends(assembled, toy):
    state, parts = assembled
    deltas = boundary_deltas(state, parts.mollified, toy.tau(1))
    assert len(deltas) == 2
    assert deltas['velocity_delta'].max() < 1e-10


def test_frozen_interval_keeps_mollified_state(toy, grid, stage0):
    overrides = ToyOverrides(delta_next=1.0, block_radius=0.05, block_alpha=0.5,
                             smoothing_ell=4.0 * grid.spacing, freeze_prefix=1.0)
    state, parts = assemble_stage(stage0, toy, overrides, CELL)
    assert parts.cells == []
    np.testing.assert_allclose(state.velocity.values, parts.mollified.velocity.values, atol=1e-14)
    assert state.info['frozen'] == 1.0


@pytest.mark.parametrize('error, wrapped', [(ValueError, True), (TrajectoryError, True), (TypeError, False)])
def test_cell_failures_keep_their_provenance(toy, grid, stage0, monkeypatch, error, wrapped):
    def failing_cell(*args, **kwargs):
        raise error('cell failed')

    monkeypatch.setattr(iteration, 'build_cell', failing_cell)
    overrides = ToyOverrides(delta_next=1.0, block_radius=0.05, block_alpha=0.5, smoothing_ell=4.0 * grid.spacing)
    expected = ConstructionError if wrapped else error
    with pytest.raises(expected) as info:
        assemble_stage(stage0, toy, overrides, CELL)
    if wrapped:
        assert 'direction 1' in str(info.value)
        assert isinstance(info.value.__cause__, error)


def test_diagnostics_columns(assembled, stage0):
    state, _ = assembled
    table = diagnostics(state, stage0, delta_next=1.0)
    for column in ('stress_l1', 'velocity_l2', 'energy', 'gradient_lpbar', 'step_l2', 'step_over_sqrt_delta',
                   'vorticity_l1.5', 'vorticity_l2'):
        assert column in table.columns
    assert len(table) == len(stage0.times)
