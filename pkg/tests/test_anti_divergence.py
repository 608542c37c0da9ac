import numpy as np
import pytest

from anti_divergence import (
    BogovskiiQuadrature, _fd_divergence, bogovskii_scalar, bogovskii_vector, disc_integral, moment_defect,
    random_compact_source, random_torus_field, symmetric_antidiv_torus, unit_bump, verify_antidivergence,
)
from spectral_torus import CompactField, MeanError, TorusGrid, TorusVectorField, bump, tensor_divergence


@pytest.fixture(scope='module')
def grid():
    return TorusGrid(2 * np.pi, 32)


def _bump_gradient(width):
    """grad bump(|x| / width), supported in B_width."""
    def g(x):
        s2 = (x[0] ** 2 + x[1] ** 2) / width ** 2
        inside = s2 < 1.0
        denom = np.where(inside, 1.0 - s2, 1.0)
        factor = np.where(inside, -2.0 * np.exp(-1.0 / denom) / denom ** 2 / width ** 2, 0.0)
        return np.stack([factor * x[0], factor * x[1]])
    return g


def _interior_points(rng, count, radius=0.8):
    r = np.sqrt(rng.uniform(0.0, radius ** 2, count))
    angle = rng.uniform(0.0, 2 * np.pi, count)
    return r * np.stack([np.cos(angle), np.sin(angle)])


def test_unit_bump_has_unit_mass():
    assert float(disc_integral(unit_bump, [0.0, 1.0])) == pytest.approx(1.0, abs=1e-9)


def test_quadrature_rejects_coarse_rules():
    with pytest.raises(ValueError):
        BogovskiiQuadrature(angles=4)


def test_bogovskii_scalar_round_trip():
    rng = np.random.default_rng(3)
    f = random_compact_source(rng)
    B = bogovskii_scalar(f, (0.0, 0.0), 1.0, BogovskiiQuadrature(angles=256))
    x = np.concatenate([_interior_points(rng, 5), np.reshape(f.center, (2, 1))], axis=1)
    div = _fd_divergence(B, x, 1e-3)[0]
    scale = np.max(np.abs(f(x)))
    assert np.max(np.abs(div - f(x))) < 1e-6 * max(scale, 1.0)


def test_bogovskii_vanishes_outside_ball():
    rng = np.random.default_rng(4)
    B = bogovskii_scalar(random_compact_source(rng), (0.0, 0.0), 1.0)
    angle = np.linspace(0, 2 * np.pi, 7)
    x = 1.2 * np.stack([np.cos(angle), np.sin(angle)])
    assert np.all(B(x) == 0.0)


def test_bogovskii_vector_round_trip():
    g = _bump_gradient(0.6)
    v = CompactField(lambda x: np.stack([-g(x)[1], g(x)[0]]), 0.6, components=2, smoothness='smooth')
    A = bogovskii_vector(v, (0.0, 0.0), 1.0, BogovskiiQuadrature(angles=256))
    x = _interior_points(np.random.default_rng(5), 5, radius=0.7)
    div = _fd_divergence(A, x, 1e-3)
    np.testing.assert_allclose(div, v(x), atol=1e-6 * max(np.max(np.abs(v(x))), 1.0))


def test_bogovskii_rejects_nonzero_mean():
    f = CompactField(unit_bump, 1.0, smoothness='smooth')
    with pytest.raises(MeanError):
        bogovskii_scalar(f, (0.0, 0.0), 1.0)


def test_bogovskii_rejects_support_outside_ball():
    f = CompactField(lambda x: np.zeros(x.shape[1:]), 1.0, center=(0.5, 0.0))
    with pytest.raises(ValueError):
        bogovskii_scalar(f, (0.0, 0.0), 1.0)


def test_bogovskii_component_checks():
    scalar = CompactField(lambda x: np.zeros(x.shape[1:]), 0.5)
    vector = CompactField(lambda x: np.zeros((2,) + x.shape[1:]), 0.5, components=2)
    with pytest.raises(ValueError):
        bogovskii_scalar(vector, (0.0, 0.0), 1.0)
    with pytest.raises(ValueError):
        bogovskii_vector(scalar, (0.0, 0.0), 1.0)


def test_moment_defect_of_gradient_and_perp_gradient():
    g = _bump_gradient(1.0)
    grad = CompactField(g, 1.0, components=2, smoothness='smooth')
    perp = CompactField(lambda x: np.stack([-g(x)[1], g(x)[0]]), 1.0, components=2, smoothness='smooth')
    mass = float(disc_integral(lambda x: bump(np.hypot(x[0], x[1])), [0.0, 1.0]))
    assert moment_defect(grad) == pytest.approx(0.0, abs=1e-10)
    # int x . grad(phi) = -2 int phi
    assert moment_defect(perp) == pytest.approx(-2.0 * mass, rel=1e-8)


def test_torus_antidivergence_round_trip(grid):
    v = random_torus_field(np.random.default_rng(6), grid)
    R = symmetric_antidiv_torus(v)
    scale = np.max(np.abs(v.values))
    np.testing.assert_allclose(tensor_divergence(R).values, v.values, atol=1e-10 * scale)
    np.testing.assert_allclose(R.values[0] + R.values[2], 0.0, atol=1e-12 * scale)


def test_torus_antidivergence_rejects_mean(grid):
    v = TorusVectorField(grid, np.ones((2, grid.resolution, grid.resolution)))
    with pytest.raises(MeanError):
        symmetric_antidiv_torus(v)


def test_verify_antidivergence_checks(grid):
    table = verify_antidivergence(np.random.default_rng(7), grid, count=2, points=4)
    values = dict(zip(table['check'], table['value']))
    assert values['bogovskii_round_trip'] <= 1e-6
    assert values['bogovskii_support'] == 0.0
    assert values['torus_round_trip'] < 1e-10
    assert values['torus_trace_free'] < 1e-12
