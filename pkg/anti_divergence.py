"""
Anti-divergence Operators
Compactly supported Bogovskii inverse of the divergence on the plane and the
symmetric anti-divergence R0 on the torus.

The Bogovskii integral is evaluated in polar form around each point,

    B f(x) = int_{S^1} w [ F1(x, w) G0(x, w) + F0(x, w) G1(x, w) ] dw,
    Fk = int_0^inf f(x - s w) s^k ds,   Gk = int_0^inf gamma(x + u w) u^k du,

with gamma the unit-mass smooth bump of the ball. Angles use the periodic
trapezoid rule, the radial integrals Gauss-Legendre nodes on the chord inside
the ball, split where a ray crosses one of the circles given as `breaks` or
the edge of the support of f. Every piece then ends where its integrand is
flat, so the radial rule converges quickly.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import quad, quad_vec

from report_writer import checks_frame
from spectral_torus import (
    CompactField, MeanError, TorusSymTensorField, TorusVectorField, bump, check_mean_zero, tensor_divergence,
)

CHUNK_POINTS = 4096


@dataclass(frozen=True)
class BogovskiiQuadrature:
    angles: int = 96
    radial: int = 64
    mean_tol: float = 1e-8

    def __post_init__(self):
        if self.angles < 8 or self.radial < 8:
            raise ValueError(f"quadrature too coarse: {self.angles} angles, {self.radial} radial nodes")


def disc_integral(func: Callable[[np.ndarray], np.ndarray], breaks: Sequence[float],
                  center: Sequence[float] = (0.0, 0.0), angles: int = 256,
                  epsabs: float = 1e-13, epsrel: float = 1e-11) -> np.ndarray:
    """Integral over the disc of radius breaks[-1]: adaptive in radius, trapezoid in angle.

    `breaks` are the radii where func may lose smoothness.
    """
    theta = 2.0 * np.pi * np.arange(angles) / angles
    directions = np.stack([np.cos(theta), np.sin(theta)])
    c = np.asarray(center, dtype=float).reshape(2, 1)

    def ring(rho):
        values = np.asarray(func(c + rho * directions))
        return 2.0 * np.pi * rho * values.mean(axis=-1)

    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        value, _ = quad_vec(ring, a, b, epsabs=epsabs, epsrel=epsrel)
        total = total + value
    return np.asarray(total)


@lru_cache(maxsize=None)
def _bump_mass() -> float:
    value, _ = quad(lambda s: np.exp(-1.0 / (1.0 - s * s)) * s, 0.0, 1.0, epsabs=1e-15)
    return 2.0 * np.pi * value


def unit_bump(y: np.ndarray) -> np.ndarray:
    """The smooth bump on B1 normalized to unit mass."""
    return bump(np.hypot(y[0], y[1])) / _bump_mass()


def _check_support(f: CompactField, center: Sequence[float], radius: float):
    offset = np.hypot(f.center[0] - center[0], f.center[1] - center[1])
    if f.support_radius + offset > radius * (1.0 + 1e-12):
        raise ValueError(
            f"support radius {f.support_radius:g} at offset {offset:g} leaves the ball of radius {radius:g}"
        )


def _check_mean(f: CompactField, quadrature: BogovskiiQuadrature, breaks: Sequence[float]):
    cuts = sorted({0.0, *[b for b in breaks if 0.0 < b < f.support_radius], f.support_radius})
    mean = np.atleast_1d(disc_integral(f, cuts, f.center))
    scale = np.atleast_1d(disc_integral(lambda x: np.abs(f(x)), cuts, f.center))
    if np.any(np.abs(mean) > quadrature.mean_tol * np.maximum(scale, 1e-300)):
        raise MeanError(f"Bogovskii input must have zero mean, got {mean.tolist()}")


def _chord(y: np.ndarray, direction: np.ndarray, center: np.ndarray, beta: float):
    """Parameters t where y + t direction meets the circle |p - center| = beta (equal when it misses)."""
    d = y - center.reshape(2, 1)
    proj = direction @ d
    disc = np.sqrt(np.maximum(proj ** 2 - np.sum(d ** 2, axis=0) + beta ** 2, 0.0))
    return -proj - disc, -proj + disc


def _ray_nodes(y: np.ndarray, direction: np.ndarray, circles: Sequence[Tuple[np.ndarray, float]],
               nodes: np.ndarray, weights: np.ndarray):
    """Gauss-Legendre nodes on the part of y + t direction inside B1, split where the ray crosses a circle."""
    _, end = _chord(y, direction, np.zeros(2), 1.0)
    cuts = [np.zeros_like(end), end]
    for center, beta in circles:
        cuts += list(_chord(y, direction, center, beta))
    cuts = np.sort(np.clip(np.array(cuts), 0.0, end), axis=0)
    a, b = cuts[:-1], cuts[1:]
    half = 0.5 * (b - a)
    t = a[:, None, :] + half[:, None, :] * (nodes[None, :, None] + 1.0)
    wt = half[:, None, :] * weights[None, :, None]
    m = y.shape[1]
    return t.reshape(-1, m), wt.reshape(-1, m)


def _bogovskii_unit(f_unit: Callable[[np.ndarray], np.ndarray], y: np.ndarray, components: int,
                    quadrature: BogovskiiQuadrature,
                    circles: Sequence[Tuple[np.ndarray, float]] = ()) -> np.ndarray:
    """B f on the unit ball at points y of shape (2, m); returns (components, 2, m)."""
    nodes, weights = np.polynomial.legendre.leggauss(quadrature.radial)
    n_angles = quadrature.angles
    out = np.zeros((components, 2, y.shape[1]))
    for a in range(n_angles):
        theta = 2.0 * np.pi * a / n_angles
        w = np.array([np.cos(theta), np.sin(theta)])
        s, ws = _ray_nodes(y, -w, circles, nodes, weights)
        backward = y[:, None, :] - s[None] * w[:, None, None]
        f_vals = np.asarray(f_unit(backward)).reshape((components,) + s.shape)
        F0 = np.einsum('sm,ksm->km', ws, f_vals)
        F1 = np.einsum('sm,ksm->km', ws * s, f_vals)
        # gamma is flat where the forward ray leaves B1
        u, wu = _ray_nodes(y, w, (), nodes, weights)
        g_vals = unit_bump(y[:, None, :] + u[None] * w[:, None, None])
        G0 = np.sum(wu * g_vals, axis=0)
        G1 = np.sum(wu * u * g_vals, axis=0)
        out += (2.0 * np.pi / n_angles) * (F1 * G0 + F0 * G1)[:, None, :] * w[None, :, None]
    return out


def _bogovskii(f: CompactField, center: Sequence[float], radius: float,
               quadrature: BogovskiiQuadrature, breaks: Sequence[float]) -> CompactField:
    _check_support(f, center, radius)
    _check_mean(f, quadrature, breaks)
    c = np.asarray(center, dtype=float).reshape(2, 1, 1)
    k = f.components
    circles = [(np.zeros(2), b / radius) for b in breaks]
    offset = (np.asarray(f.center, dtype=float) - c[:, 0, 0]) / radius
    if np.any(offset != 0.0) or f.support_radius < radius * (1.0 - 1e-12):
        # rays also split where they cross the edge of f's own support
        circles.append((offset, f.support_radius / radius))

    def f_unit(y):
        return f(c + radius * y)

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(2, -1)
        y = (flat - c[:, :, 0]) / radius
        out = np.zeros((k, 2, flat.shape[1]))
        inside = np.hypot(y[0], y[1]) < 1.0
        index = np.flatnonzero(inside)
        for start in range(0, index.size, CHUNK_POINTS):
            chunk = index[start:start + CHUNK_POINTS]
            out[:, :, chunk] = radius * _bogovskii_unit(f_unit, y[:, chunk], k, quadrature, circles)
        return out.reshape((2 * k,) + x.shape[1:])

    return CompactField(evaluate, radius, components=2 * k, smoothness='smooth',
                        center=(float(center[0]), float(center[1])))


def bogovskii_scalar(f: CompactField, center: Sequence[float], radius: float,
                     quadrature: BogovskiiQuadrature = BogovskiiQuadrature(),
                     breaks: Sequence[float] = ()) -> CompactField:
    """Vector field supported in B_radius(center) whose divergence is f."""
    if f.components != 1:
        raise ValueError(f"bogovskii_scalar expects a scalar field, got {f.components} components")
    return _bogovskii(f, center, radius, quadrature, breaks)


def bogovskii_vector(v: CompactField, center: Sequence[float], radius: float,
                     quadrature: BogovskiiQuadrature = BogovskiiQuadrature(),
                     breaks: Sequence[float] = ()) -> CompactField:
    """Row-major 2x2 tensor A supported in B_radius(center) with d_j A_ij = v_i.

    A is not symmetric in general; symmetry needs at least the moment
    condition int (x1 v2 - x2 v1) = 0.
    """
    if v.components != 2:
        raise ValueError(f"bogovskii_vector expects a vector field, got {v.components} components")
    return _bogovskii(v, center, radius, quadrature, breaks)


def symmetric_antidiv_torus(v: TorusVectorField, tol: float = 1e-10) -> TorusSymTensorField:
    """R0 v = D Lap^-1 v + (D Lap^-1 v)^T - I div Lap^-1 v; symmetric and trace-free."""
    check_mean_zero(v, tol, 'anti-divergence input')
    grid = v.grid
    k1, k2 = grid.wavenumbers
    phi = -grid.inverse_k_squared * v.spectrum
    d1_phi1 = 1j * k1 * phi[0]
    d2_phi2 = 1j * k2 * phi[1]
    spec = np.stack([d1_phi1 - d2_phi2, 1j * (k2 * phi[0] + k1 * phi[1]), d2_phi2 - d1_phi1])
    return TorusSymTensorField.from_spectrum(grid, spec)


def moment_defect(v: CompactField, breaks: Sequence[float] = ()) -> float:
    """int (x1 v2 - x2 v1) about the support center."""
    c = np.asarray(v.center, dtype=float)
    cuts = sorted({0.0, *[b for b in breaks if 0.0 < b < v.support_radius], v.support_radius})

    def torque(x):
        values = v(x)
        return (x[0] - c[0]) * values[1] - (x[1] - c[1]) * values[0]

    return float(disc_integral(torque, cuts, v.center))


def _fd_divergence(field_: CompactField, points: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order centered differences of the row divergence d_j A_ij at points (2, m)."""
    total = 0.0
    for j in range(2):
        e = np.zeros((2, 1))
        e[j] = h
        values = [np.asarray(field_(points + m * e)) for m in (-2, -1, 1, 2)]
        d = (values[0] - 8.0 * values[1] + 8.0 * values[2] - values[3]) / (12.0 * h)
        total = total + d.reshape((-1, 2) + d.shape[1:])[:, j]
    return np.asarray(total)


def random_compact_source(rng: np.random.Generator, radius: float = 1.0) -> CompactField:
    """f = c . grad(phi) for a random smooth bump phi inside B_radius; zero mean by construction."""
    width = rng.uniform(0.5, 0.7) * radius
    offset = rng.uniform(-1.0, 1.0, 2) * (radius - width) / np.sqrt(2.0)
    c = rng.normal(size=2)

    def f(x):
        d = x - offset.reshape((2,) + (1,) * (x.ndim - 1))
        s2 = (d[0] ** 2 + d[1] ** 2) / width ** 2
        inside = s2 < 1.0
        denom = np.where(inside, 1.0 - s2, 1.0)
        phi = np.where(inside, np.exp(-1.0 / denom), 0.0)
        factor = -2.0 * phi / denom ** 2 / width ** 2
        return factor * (c[0] * d[0] + c[1] * d[1])

    return CompactField(f, width, components=1, smoothness='smooth', center=(float(offset[0]), float(offset[1])))


def random_torus_field(rng: np.random.Generator, grid, modes: int = 6) -> TorusVectorField:
    """Mean-zero random trigonometric vector field with |n| <= modes."""
    n1, n2 = grid.mode_numbers
    keep = (np.abs(n1) <= modes) & (np.abs(n2) <= modes) & ((n1 != 0) | (n2 != 0))
    values = []
    for _ in range(2):
        spectrum = np.where(keep, rng.normal(size=keep.shape) + 1j * rng.normal(size=keep.shape), 0.0)
        values.append(np.fft.ifft2(spectrum).real * grid.resolution)
    return TorusVectorField(grid, np.stack(values))


def verify_antidivergence(rng: np.random.Generator, grid, count: int = 20, points: int = 12,
                          quadrature: BogovskiiQuadrature = BogovskiiQuadrature(angles=256)) -> pd.DataFrame:
    """Round trips div(B f) = f on the plane and div(R0 v) = v on the torus."""
    plane, outside, torus, trace = 0.0, 0.0, 0.0, 0.0
    for _ in range(count):
        f = random_compact_source(rng)
        B = bogovskii_scalar(f, (0.0, 0.0), 1.0, quadrature)
        radius = np.sqrt(rng.uniform(0.0, 0.8 ** 2, points))
        angle = rng.uniform(0.0, 2.0 * np.pi, points)
        x = radius * np.stack([np.cos(angle), np.sin(angle)])
        div = _fd_divergence(B, x, 1e-3)[0]
        plane = max(plane, float(np.max(np.abs(div - f(x))) / max(np.max(np.abs(f(x))), 1.0)))
        far = 1.0 + rng.uniform(0.01, 0.5, points)
        y = far * np.stack([np.cos(angle), np.sin(angle)])
        outside = max(outside, float(np.max(np.abs(B(y)))))

        v = random_torus_field(rng, grid)
        R = symmetric_antidiv_torus(v)
        scale = max(float(np.max(np.abs(v.values))), 1e-300)
        torus = max(torus, float(np.max(np.abs(tensor_divergence(R).values - v.values))) / scale)
        trace = max(trace, float(np.max(np.abs(R.values[0] + R.values[2]))) / scale)

    return checks_frame([
        ('bogovskii_round_trip', plane, 1e-6),
        ('bogovskii_support', outside, 0.0),
        ('torus_round_trip', torus, 1e-10),
        ('torus_trace_free', trace, 1e-12),
    ])
