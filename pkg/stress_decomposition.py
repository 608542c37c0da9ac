"""
Stress Decomposition
Splits a Reynolds stress into four rank-one directions, partitions time into
intervals with sharp cutoffs, averages in time, and picks the amplitude,
start point and period of every block.

Directions are xi_i = K e_i with K the counter-clockwise rotation by
arctan(1/lambda) and e_i in {(1,0), (0,1), (1,1)/sqrt2, (1,-1)/sqrt2}; the
line s -> s xi_i closes on the torus after length L |l_i| where l_i is the
primitive lattice vector (lambda, 1), (-1, lambda), (lambda-1, lambda+1) or
(lambda+1, 1-lambda), each divided by its gcd.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from lamb_chaplygin import cutoff
from report_writer import checks_frame
from spectral_torus import (
    ResolutionError, SpaceTimeField, TorusScalarField, TorusSymTensorField,
    gradient, lp_norm, tensor_divergence,
)

FRAME = np.array([[1.0, 0.0], [0.0, 1.0], [2 ** -0.5, 2 ** -0.5], [2 ** -0.5, -(2 ** -0.5)]])
SIGMA_FACTOR = 16.0


class BracketError(RuntimeError):
    """No sign change of the line-average defect was found for the start point."""


# ---------------------------------------------------------------------------
# Directions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirectionSet:
    lam: int

    def __post_init__(self):
        if int(self.lam) != self.lam or self.lam < 8:
            raise ValueError(f"frequency lambda must be an integer >= 8, got {self.lam}")

    @property
    def angle(self) -> float:
        return float(np.arctan(1.0 / self.lam))

    @cached_property
    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    @cached_property
    def lattice(self) -> np.ndarray:
        lam = self.lam
        raw = np.array([[lam, 1], [-1, lam], [lam - 1, lam + 1], [lam + 1, 1 - lam]], dtype=np.int64)
        # odd lambda: the diagonal vectors share a factor 2
        return raw // np.gcd(raw[:, 0], raw[:, 1])[:, None]

    @cached_property
    def vectors(self) -> np.ndarray:
        """(4, 2) unit directions xi_i = K e_i."""
        return FRAME @ self.rotation.T

    @cached_property
    def periods(self) -> np.ndarray:
        """c_i with line length c_i lambda on the unit torus."""
        return np.hypot(self.lattice[:, 0], self.lattice[:, 1]) / self.lam

    def line_length(self, i: int, side_length: float = 1.0) -> float:
        return float(side_length * np.hypot(*self.lattice[i]))

    def lattice_defect(self) -> float:
        """max |xi_i - l_i / |l_i||."""
        unit = self.lattice / np.hypot(self.lattice[:, 0], self.lattice[:, 1])[:, None]
        return float(np.max(np.abs(self.vectors - unit)))


def build_directions(lam: int) -> DirectionSet:
    return DirectionSet(int(lam))


# ---------------------------------------------------------------------------
# Pointwise decomposition
# ---------------------------------------------------------------------------

def frame_weights(m11, m12, m22) -> np.ndarray:
    """Gamma_bar: sum_i Gamma_bar_i(M) e_i (x) e_i = M for the unrotated frame."""
    m11, m12, m22 = np.broadcast_arrays(np.asarray(m11, float), np.asarray(m12, float), np.asarray(m22, float))
    half = np.full_like(m11, 0.5)
    return np.stack([m11 - m12 - 0.5, m22 - m12 - 0.5, 2.0 * m12 + 0.5, half])


def _rotate_back(rotation: np.ndarray, m11, m12, m22):
    """Components of K^T M K."""
    M = np.array([[m11, m12], [m12, m22]])
    out = np.einsum('ki,kl...,lj->ij...', rotation, M, rotation)
    return out[0, 0], out[0, 1], out[1, 1]


def decompose_matrix(R, directions: DirectionSet, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """(a_1..a_4, varsigma) with sum a_i xi_i (x) xi_i = -R + varsigma I.

    R is a symmetric 2x2 matrix or stored components (R11, R12, R22, ...).
    varsigma = 16 (|R|^2 + delta^2)^(1/2) with the Frobenius norm.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    R = np.asarray(R, dtype=float)
    if R.shape[:2] == (2, 2):
        r11, r12, r22 = R[0, 0], R[0, 1], R[1, 1]
    else:
        r11, r12, r22 = R[0], R[1], R[2]
    sigma = SIGMA_FACTOR * np.sqrt(r11 ** 2 + 2.0 * r12 ** 2 + r22 ** 2 + delta ** 2)
    m11, m12, m22 = 1.0 - r11 / sigma, -r12 / sigma, 1.0 - r22 / sigma
    weights = frame_weights(*_rotate_back(directions.rotation, m11, m12, m22))
    return sigma * weights, sigma


def reconstruct(amplitudes: np.ndarray, directions: DirectionSet) -> np.ndarray:
    """Stored components of sum_i a_i xi_i (x) xi_i."""
    xi = directions.vectors
    return np.stack([
        np.einsum('i...,i->...', amplitudes, xi[:, 0] * xi[:, 0]),
        np.einsum('i...,i->...', amplitudes, xi[:, 0] * xi[:, 1]),
        np.einsum('i...,i->...', amplitudes, xi[:, 1] * xi[:, 1]),
    ])


@dataclass(frozen=True, eq=False)
class StageCoefficients:
    """Amplitudes a_i(x, t), varsigma and the pressure defect P^d = -varsigma.

    With these, -div R = div(sum a_i xi_i (x) xi_i) + grad P^d.
    """
    directions: DirectionSet
    delta: float
    amplitudes: List[SpaceTimeField]
    varsigma: SpaceTimeField

    @property
    def pressure_defect(self) -> SpaceTimeField:
        return self.varsigma * -1.0

    def amplitude_frame(self, j: int) -> np.ndarray:
        return np.stack([a.values[j] for a in self.amplitudes])


def decompose_field(R: SpaceTimeField, directions: DirectionSet, delta: float) -> StageCoefficients:
    """Pointwise decompose_matrix over every sample of a symmetric-tensor field."""
    if R.field_type is not TorusSymTensorField:
        raise TypeError(f"decompose_field expects a symmetric tensor field, got {R.field_type.__name__}")
    values = np.moveaxis(R.values, 1, 0)  # (3, T, N, N)
    amplitudes, sigma = decompose_matrix(values, directions, delta)
    fields = [SpaceTimeField(R.times, amplitudes[i], R.grid, TorusScalarField) for i in range(4)]
    return StageCoefficients(directions, delta, fields, SpaceTimeField(R.times, sigma, R.grid, TorusScalarField))


def decomposition_report(R: SpaceTimeField, coefficients: StageCoefficients) -> pd.DataFrame:
    """Per-time bounds and identity residuals of a field decomposition."""
    rows = []
    delta = coefficients.delta
    for j, t in enumerate(R.times):
        a = coefficients.amplitude_frame(j)
        sigma = coefficients.varsigma.values[j]
        R_j = R.values[j]
        target = -R_j + np.stack([sigma, np.zeros_like(sigma), sigma])
        recon = reconstruct(a, coefficients.directions)
        grid = R.grid
        stress = TorusSymTensorField(grid, recon)
        lhs = -tensor_divergence(TorusSymTensorField(grid, R_j))
        rhs = tensor_divergence(stress) - gradient(TorusScalarField(grid, sigma))
        scale = max(lp_norm(lhs, np.inf), lp_norm(tensor_divergence(stress), np.inf), 1e-300)
        rows.append({
            'time': float(t),
            'min_a_over_delta': float(np.min(a) / delta),
            'max_a_l1_over_delta': float(max(np.sum(a[i]) * grid.cell_area for i in range(4)) / delta),
            'stress_l1': lp_norm(TorusSymTensorField(grid, R_j), 1.0),
            'reconstruction_residual': float(np.max(np.abs(recon - target)) / np.max(np.abs(target))),
            'divergence_identity': lp_norm(lhs - rhs, np.inf) / scale,
        })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Time partition
# ---------------------------------------------------------------------------

def ramp(t, start: float, width: float):
    """Smooth step from 0 at `start` to 1 at `start + width`, and its derivative."""
    chi, d_chi, _ = cutoff(1.0 + (np.asarray(t, dtype=float) - start) / width)
    return chi, d_chi / width


@dataclass(frozen=True)
class TimePartition:
    """Intervals T^k = [k tau, (k+1) tau), quarters T_i^k and cutoffs zeta_i^k."""
    tau: float
    lam: int

    def __post_init__(self):
        inverse = 1.0 / self.tau
        if abs(inverse - round(inverse)) > 1e-9 or round(inverse) < 10:
            raise ValueError(f"1/tau must be an integer >= 10, got {inverse}")
        if self.lam < 8:
            raise ValueError(f"lambda must be >= 8, got {self.lam}")

    @property
    def ramp_width(self) -> float:
        return self.tau / self.lam

    def interval(self, k: int) -> Tuple[float, float]:
        return k * self.tau, (k + 1) * self.tau

    def quarter(self, i: int, k: int) -> Tuple[float, float]:
        """T_i^k for direction index i in 0..3."""
        start = k * self.tau + i * self.tau / 4.0
        return start, start + self.tau / 4.0

    def plateau(self, i: int, k: int) -> Tuple[float, float]:
        """Shortened interval: T_i^k inset by tau / lambda at both ends."""
        a, b = self.quarter(i, k)
        return a + self.ramp_width, b - self.ramp_width

    def cutoff(self, i: int, k: int, t) -> np.ndarray:
        return self.cutoff_with_rate(i, k, t)[0]

    def cutoff_with_rate(self, i: int, k: int, t):
        """zeta_i^k(t) and its derivative."""
        a, b = self.quarter(i, k)
        w = self.ramp_width
        up, d_up = ramp(t, a, w)
        down, d_down = ramp(-np.asarray(t, dtype=float), -b, w)
        return up * down, d_up * down - up * d_down

    def interval_index(self, t: float) -> int:
        return int(np.floor(t / self.tau + 1e-9))

    def interval_range(self, times) -> Tuple[int, int]:
        """First and last interval touched by sorted sample times.

        A final sample sitting on a partition point closes its interval, it does not open the next one.
        """
        k_lo = self.interval_index(times[0])
        k_hi = int(np.ceil(times[-1] / self.tau - 1e-9)) - 1
        return k_lo, max(k_hi, k_lo)

    def active(self, t: float) -> Optional[Tuple[int, int]]:
        """(i, k) whose quarter contains t, if zeta_i^k(t) > 0."""
        k = self.interval_index(t)
        i = int(np.floor((t - k * self.tau) / (self.tau / 4.0)))
        i = min(max(i, 0), 3)
        return (i, k) if self.cutoff(i, k, t) > 0 else None

    @property
    def max_slope(self) -> float:
        """Bound 10 lambda / tau on |d zeta / dt|."""
        return 10.0 * self.lam / self.tau


def build_partition(tau: float, lam: int) -> TimePartition:
    return TimePartition(float(tau), int(lam))


def time_average(g: Union[SpaceTimeField, Tuple[np.ndarray, np.ndarray]], partition: TimePartition):
    """Per-interval trapezoid averages, returned as a piecewise-constant series on the same times.

    Accepts a SpaceTimeField or a pair (times, values) with time along axis 0.
    Every interval touched by the samples must be covered from end to end.
    """
    if isinstance(g, SpaceTimeField):
        times, values = g.times, g.values
    else:
        times, values = (np.asarray(x, dtype=float) for x in g)
    tau = partition.tau
    eps = 1e-9 * tau
    k_lo, k_hi = partition.interval_range(times)
    averages = {}
    for k in range(k_lo, k_hi + 1):
        a, b = partition.interval(k)
        mask = (times >= a - eps) & (times <= b + eps)
        if mask.sum() < 2 or times[mask][0] > a + eps or times[mask][-1] < b - eps:
            raise ResolutionError(f"time samples do not cover the interval [{a:g}, {b:g}]")
        averages[k] = trapezoid(values[mask], times[mask], axis=0) / tau
    out = np.empty_like(values)
    for j, t in enumerate(times):
        k = min(max(partition.interval_index(t), k_lo), k_hi)
        out[j] = averages[k]
    if isinstance(g, SpaceTimeField):
        return SpaceTimeField(times, out, g.grid, g.field_type)
    return times, out


def interval_averages(coefficients: StageCoefficients, partition: TimePartition, k: int) -> List[TorusScalarField]:
    """a_i^k: the time averages of a_i over T^k."""
    fields = []
    for a in coefficients.amplitudes:
        averaged = time_average(a, partition)
        j = int(np.argmin(np.abs(averaged.times - (k + 0.5) * partition.tau)))
        fields.append(averaged.frame(j))
    return fields


# ---------------------------------------------------------------------------
# Amplitude, start point and period
# ---------------------------------------------------------------------------

def line_average_function(a: TorusScalarField, lattice: Sequence[int]):
    """Average of a over the closed line x0(s) + t xi, as a function of the transverse offset s.

    x0(s) = s n with n the unit normal to the lattice vector; the function
    has period L / |l| in s and mean equal to the torus mean of a.
    """
    grid = a.grid
    N, L = grid.resolution, grid.side_length
    l1, l2 = int(lattice[0]), int(lattice[1])
    length = np.hypot(l1, l2)
    coeffs = a.spectrum / N ** 2
    m_max = (N // 2 - 1) // max(abs(l1), abs(l2))
    ms = np.arange(-m_max, m_max + 1)
    modes = np.array([coeffs[(-m * l2) % N, (m * l1) % N] for m in ms])
    normal = np.array([-l2, l1]) / length

    def g(s):
        return float(np.real(np.sum(modes * np.exp(2j * np.pi * ms * length * s / L))))

    return g, normal, L / length


@dataclass(frozen=True)
class AmplitudeChoice:
    eta: float
    x0: np.ndarray
    integral: float
    line_defect: float

    @property
    def normalized_square(self) -> float:
        """eta^2 / (2 pi) = 4 int a."""
        return self.eta ** 2 / (2.0 * np.pi)


def select_amplitude_and_start(a: TorusScalarField, directions: DirectionSet, i: int,
                               sweep: Optional[int] = None, tol: float = 1e-10) -> AmplitudeChoice:
    """eta with eta^2 = 8 pi int a, and a start point whose line average equals the torus mean.

    The stage runs each block with the cutoff eta zeta / (2 pi), so the
    cancellation condition on the normalized amplitude reads
    eta^2 / (2 pi) = 4 int a; `normalized_square` reports that value.
    """
    integral = float(a.integral())
    if integral <= 0:
        raise ValueError(f"amplitude must have positive integral, got {integral}")
    eta = float(np.sqrt(8.0 * np.pi * integral))
    mean = integral / a.grid.area
    g, normal, period = line_average_function(a, directions.lattice[i])
    defect = lambda s: g(s) - mean

    sweep = 4 * directions.lam if sweep is None else sweep
    scale = max(float(np.max(np.abs(a.values))), 1e-300)
    s_grid = np.linspace(0.0, period, sweep + 1)
    values = np.array([defect(s) for s in s_grid])
    if np.max(np.abs(values)) <= tol * scale:
        return AmplitudeChoice(eta, np.zeros(2), integral, float(abs(values[0])))
    root = None
    for refine in (1, 8):
        if refine > 1:
            s_grid = np.linspace(0.0, period, refine * sweep + 1)
            values = np.array([defect(s) for s in s_grid])
        exact = np.flatnonzero(values == 0.0)
        if exact.size:
            root = s_grid[exact[0]]
            break
        changes = np.flatnonzero(np.sign(values[:-1]) != np.sign(values[1:]))
        if changes.size:
            j = changes[0]
            root = brentq(defect, s_grid[j], s_grid[j + 1], xtol=tol * period, rtol=4 * np.finfo(float).eps)
            break
    if root is None:
        raise BracketError(f"no sign change of the line-average defect for direction {i + 1}")
    x0 = np.mod(root * normal, a.grid.side_length)
    return AmplitudeChoice(eta, x0, integral, float(abs(defect(root))))


@dataclass(frozen=True)
class PeriodInfo:
    period: float
    count: int
    window: float
    plateau_length: float
    lam: int
    trajectory_ratio: Optional[float] = None

    @property
    def enough_periods(self) -> bool:
        return self.count >= self.lam

    @property
    def window_ok(self) -> bool:
        """0 <= |plateau| - M T < T."""
        return 0.0 <= self.window < self.period


def trajectory_ratio(lam: int, r_next: float, delta: float, tau: float, improved: bool = False) -> float:
    """lambda^2 r delta^(1/2) / (tau / 200); lambda^(3/2) in the improved variant."""
    power = 1.5 if improved else 2.0
    return float(lam) ** power * r_next * np.sqrt(delta) * 200.0 / tau


def period_bookkeeping(directions: DirectionSet, i: int, r_next: float, eta: float,
                       partition: TimePartition, side_length: float = 1.0,
                       delta: Optional[float] = None, improved: bool = False) -> PeriodInfo:
    """T_i^k = c_i lambda r_{q+1} eta / 4 and M_i^k = floor(|plateau| / T).

    With `delta` given, the trajectory assumption is enforced first.
    """
    ratio = None
    if delta is not None:
        ratio = trajectory_ratio(directions.lam, r_next, delta, partition.tau, improved)
        if ratio > 1.0:
            label = 'lambda^(3/2)' if improved else 'lambda^2'
            raise ResolutionError(f"trajectory assumption {label} r delta^(1/2) <= tau/200 fails: "
                                  f"ratio {ratio:.3e} for lambda={directions.lam}, r={r_next:.3e}, "
                                  f"delta={delta:.3e}, tau={partition.tau:.3e}")
    period = directions.line_length(i, side_length) * r_next * eta / 4.0
    a, b = partition.plateau(i, 0)
    plateau_length = b - a
    count = int(np.floor(plateau_length / period))
    return PeriodInfo(period, count, plateau_length - count * period, plateau_length, directions.lam, ratio)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

def _random_stress(rng: np.random.Generator, grid, l1_target: float, modes: int = 4) -> TorusSymTensorField:
    n1, n2 = grid.mode_numbers
    keep = (np.abs(n1) <= modes) & (np.abs(n2) <= modes)
    comps = []
    for _ in range(3):
        spectrum = np.where(keep, rng.normal(size=keep.shape) + 1j * rng.normal(size=keep.shape), 0.0)
        comps.append(np.fft.ifft2(spectrum).real)
    R = TorusSymTensorField(grid, np.stack(comps))
    return R * (l1_target / max(lp_norm(R, 1.0), 1e-300))


def verify_stress_decomposition(rng: np.random.Generator, grid, lam: int = 16, delta: float = 1.0,
                                tau: float = 0.1, samples: int = 10000) -> pd.DataFrame:
    """Pointwise identity, amplitude floor and L1 bound of the decomposition; cutoff shape."""
    directions = build_directions(lam)
    scales = delta * 10.0 ** rng.uniform(-3.0, 3.0, samples)
    R = rng.normal(size=(3, samples)) * scales
    a, sigma = decompose_matrix(R, directions, delta)
    target = -R + np.stack([sigma, np.zeros_like(sigma), sigma])
    identity = float(np.max(np.abs(reconstruct(a, directions) - target) / sigma))
    floor_gap = 4.0 - float(np.min(a / delta))

    times = np.linspace(0.0, 1.0, 3)
    R_field = SpaceTimeField.from_frames(times, [_random_stress(rng, grid, 2.0 * delta) for _ in times])
    report = decomposition_report(R_field, decompose_field(R_field, directions, delta))

    partition = build_partition(tau, lam)
    t = np.linspace(0.0, tau, 40 * lam + 1)
    zetas = np.array([partition.cutoff_with_rate(i, 0, t) for i in range(4)])
    slope = float(np.max(np.abs(zetas[:, 1]))) / partition.max_slope
    plateau_gap = 0.0
    for i in range(4):
        lo, hi = partition.plateau(i, 0)
        inside = (t >= lo) & (t <= hi)
        plateau_gap = max(plateau_gap, float(np.max(np.abs(zetas[i, 0][inside] - 1.0), initial=0.0)))
    overlap = max(float(np.max(zetas[i, 0] * zetas[j, 0])) for i in range(4) for j in range(i + 1, 4))

    return checks_frame([
        ('matrix_identity', identity, 1e-12),
        ('amplitude_floor_gap', floor_gap, 0.0),
        ('amplitude_l1_over_delta', report['max_a_l1_over_delta'].max(), 192.0),
        ('divergence_identity', report['divergence_identity'].max(), 1e-10),
        ('cutoff_slope_ratio', slope, 1.0),
        ('cutoff_plateau_gap', plateau_gap, 1e-14),
        ('cutoff_overlap', overlap, 0.0),
    ])
