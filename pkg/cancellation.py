"""
Cancellation
The auxiliary block U~ with unit line averages, the source replacement
U = d/dt(eta zeta r) U~(x - x(t)) xi, the check that its time average
reproduces div(a xi (x) xi), and the time corrector Q.

One (direction i, interval k) cell is described by a StageCell: amplitude
a_i^k, start point, block size r = r_{q+1} a_i^k, cutoff and trajectory.
The moving block of a cell uses the cutoff eta zeta / (2 pi), so that

    int_{T_i^k} U dt = div( xi (x) xi int (eta zeta)^2 / (2 pi) U~(x - x(t)) dt ).
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid, simpson, trapezoid

from anti_divergence import symmetric_antidiv_torus
from config import ODE_TOL
from lamb_chaplygin import DipoleParams
from moving_block import MovingBlock, ScaleFunction, TimeCutoff, Trajectory, solve_trajectory
from report_writer import checks_frame
from spectral_torus import (
    ResolutionError, SpaceTimeField, TorusGrid, TorusScalarField, TorusSymTensorField, TorusVectorField,
    bump, divergence, gradient, gradient_potential, leray_project, lp_norm, remove_mean, sample, tensor_divergence,
)
from stress_decomposition import (
    AmplitudeChoice, DirectionSet, PeriodInfo, TimePartition, line_average_function,
    period_bookkeeping, select_amplitude_and_start, time_average,
)

OMEGA_RADIUS = 10.0
OMEGA_CORE = 5.0
MIN_LINE_AVERAGE = 1e-6
# tight enough that the trajectory's own velocity matches eta zeta / (2 pi r) to well below 1e-8
SWEEP_ODE_TOL = 1e-12


# ---------------------------------------------------------------------------
# Auxiliary block
# ---------------------------------------------------------------------------

def omega_profile(y: np.ndarray) -> np.ndarray:
    """Radial bump on B_10, at least 1 on B_5."""
    s = np.hypot(y[0], y[1]) / OMEGA_RADIUS
    return bump(s) / bump(np.array(OMEGA_CORE / OMEGA_RADIUS))


@dataclass(frozen=True, eq=False)
class AuxiliaryProfile:
    """U~ = Omega / Omega_bar centered at the origin."""
    lam: int
    lattice: Tuple[int, int]
    omega: TorusScalarField
    line_average: TorusScalarField
    field: TorusScalarField

    @property
    def grid(self) -> TorusGrid:
        return self.field.grid

    @property
    def support_radius(self) -> float:
        return OMEGA_RADIUS / self.lam

    def line_average_defect(self, rng: np.random.Generator, count: int = 100) -> float:
        """max |line average of U~ - 1| over lines through random points."""
        g, normal, _ = line_average_function(self.field, self.lattice)
        points = rng.uniform(0.0, self.grid.side_length, size=(count, 2))
        return float(max(abs(g(float(x @ normal)) - 1.0) for x in points))

    def mean_defect(self) -> float:
        return abs(float(self.field.mean()) - 1.0)

    def outside_support(self) -> float:
        """max |U~| beyond the support ball plus one grid cell."""
        rel = self.grid.relative_coordinates((0.0, 0.0))
        outside = np.hypot(rel[0], rel[1]) > self.support_radius + self.grid.spacing
        return float(np.max(np.abs(self.field.values[outside]))) if outside.any() else 0.0


def build_auxiliary(grid: TorusGrid, lam: int, lattice: Sequence[int]) -> AuxiliaryProfile:
    """Omega = lam^2 Omega_0(lam x), its average along the closed line of `lattice`, and their ratio."""
    if lam < 8:
        raise ValueError(f"lambda must be >= 8, got {lam}")
    l1, l2 = int(lattice[0]), int(lattice[1])
    omega = sample(grid, lambda y: lam ** 2 * omega_profile(lam * y), TorusScalarField,
                   (0.0, 0.0), OMEGA_RADIUS / lam)

    n1, n2 = grid.mode_numbers
    along_line = (n1 * l1 + n2 * l2) == 0
    average = TorusScalarField.from_spectrum(grid, omega.spectrum * along_line)
    low = float(np.min(average.values))
    if low < MIN_LINE_AVERAGE:
        raise ResolutionError(f"line average of the auxiliary bump drops to {low:.3e}; refine the grid")
    ratio = TorusScalarField(grid, omega.values / average.values)
    # grid division aliases into the along-line modes; reset them to those of the constant 1
    aliased = TorusScalarField.from_spectrum(grid, ratio.spectrum * along_line)
    field = TorusScalarField(grid, ratio.values - aliased.values + 1.0)
    return AuxiliaryProfile(int(lam), (l1, l2), omega, average, field)


# ---------------------------------------------------------------------------
# Stage cell
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StageCell:
    """Data of the block of direction i on the interval T^k."""
    i: int
    k: int
    directions: DirectionSet
    partition: TimePartition
    amplitude: TorusScalarField
    choice: AmplitudeChoice
    r: ScaleFunction
    r_next: float
    ode_tol: float = ODE_TOL
    ode_method: str = 'RK45'

    @property
    def direction(self) -> np.ndarray:
        return self.directions.vectors[self.i]

    @property
    def eta(self) -> float:
        return self.choice.eta

    @property
    def quarter(self) -> Tuple[float, float]:
        return self.partition.quarter(self.i, self.k)

    @property
    def plateau(self) -> Tuple[float, float]:
        return self.partition.plateau(self.i, self.k)

    @cached_property
    def period(self) -> PeriodInfo:
        return period_bookkeeping(self.directions, self.i, self.r_next, self.eta, self.partition,
                                  self.amplitude.grid.side_length)

    def zeta(self, t: float) -> Tuple[float, float]:
        value, rate = self.partition.cutoff_with_rate(self.i, self.k, t)
        return float(value), float(rate)

    @cached_property
    def cutoff(self) -> TimeCutoff:
        """Block cutoff eta zeta / (2 pi)."""
        scale = self.eta / (2.0 * np.pi)
        return TimeCutoff(lambda t: scale * self.zeta(t)[0], lambda t: scale * self.zeta(t)[1],
                          self.quarter, self.partition.ramp_width)

    @cached_property
    def trajectory(self) -> Trajectory:
        """x(t) with x = x0 at the start of the plateau."""
        return solve_trajectory(self.r, self.cutoff, self.direction, self.plateau[0], self.choice.x0,
                                self.quarter, self.ode_tol, max_step=self.partition.ramp_width / 8.0,
                                method=self.ode_method)

    def coefficient(self, t: float) -> float:
        """d/dt(eta zeta r(x(t)))."""
        zeta, zeta_rate = self.zeta(t)
        if zeta == 0.0 and zeta_rate == 0.0:
            return 0.0
        center = self.trajectory.position(t)
        r = self.r.at(center)
        r_prime = self.cutoff(t) * float(self.direction @ self.r.gradient_at(center)) / r
        return self.eta * (zeta_rate * r + zeta * r_prime)

    def squared_weight(self, t: float) -> float:
        """(eta zeta)^2 / (2 pi)."""
        return (self.eta * self.zeta(t)[0]) ** 2 / (2.0 * np.pi)

    def closure_defect(self) -> float:
        """Wrapped distance between x(t0 + T) and x0, t0 the plateau start."""
        t0 = self.plateau[0]
        return self.trajectory.wrapped_distance(t0 + self.period.period, self.choice.x0)

    def moving_block(self, params: DipoleParams, use_mask: bool = True) -> MovingBlock:
        return MovingBlock(self.r, self.cutoff, self.direction, self.trajectory, params, use_mask)


def build_cell(amplitude: TorusScalarField, directions: DirectionSet, i: int, k: int,
               partition: TimePartition, r_next: float, ode_tol: float = ODE_TOL,
               ode_method: str = 'RK45') -> StageCell:
    """Amplitude, start point and size function r = r_next a for one cell."""
    if r_next <= 0:
        raise ValueError(f"r_next must be positive, got {r_next}")
    choice = select_amplitude_and_start(amplitude, directions, i)
    r = ScaleFunction(amplitude * r_next)
    return StageCell(i, k, directions, partition, amplitude, choice, r, r_next, ode_tol, ode_method)


# ---------------------------------------------------------------------------
# Source replacement and its time average
# ---------------------------------------------------------------------------

def build_U(profile: AuxiliaryProfile, cell: StageCell, times: Sequence[float]) -> SpaceTimeField:
    """U(x, t) = d/dt(eta zeta r) U~(x - x(t)) xi; zero outside the cell's quarter."""
    grid = profile.grid
    frames = []
    for t in times:
        c = cell.coefficient(float(t))
        if c == 0.0:
            frames.append(TorusVectorField.zeros(grid))
            continue
        moved = _shifted(profile.field, cell.trajectory.position(float(t)))
        frames.append(TorusVectorField(grid, c * moved[None] * cell.direction[:, None, None]))
    return SpaceTimeField.from_frames(times, frames)


def _shifted(f: TorusScalarField, displacement: np.ndarray) -> np.ndarray:
    k1, k2 = f.grid.wavenumbers
    phase = np.exp(-1j * (k1 * displacement[0] + k2 * displacement[1]))
    return TorusScalarField.from_spectrum(f.grid, f.spectrum * phase).values


def quadrature_weights(times: np.ndarray, rule: str = 'simpson') -> np.ndarray:
    """Weights w with sum w f(t) equal to the composite rule on the samples."""
    basis = np.eye(times.size)
    if rule == 'simpson':
        return simpson(basis, x=times, axis=-1)
    if rule == 'trapezoid':
        return trapezoid(basis, x=times, axis=-1)
    raise ValueError(f"Unknown quadrature rule '{rule}'")


def _moving_integral(grid: TorusGrid, weights: np.ndarray, values: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Spectral multiplier sum_t w_t c_t exp(-i k . x(t))."""
    k1, k2 = grid.wavenumbers
    e1 = np.exp(-1j * np.outer(centers[:, 0], k1[:, 0]))
    e2 = np.exp(-1j * np.outer(centers[:, 1], k2[0, :]))
    return (e1 * (weights * values)[:, None]).T @ e2


@dataclass(frozen=True, eq=False)
class CancellationResult:
    time_average: TorusVectorField
    target: TorusVectorField
    error: TorusSymTensorField
    report: Dict[str, float]


def cell_samples(cell: StageCell, per_period: int = 32, minimum: int = 65,
                 max_displacement: Optional[float] = None) -> np.ndarray:
    """Odd number of uniform samples over the cell's quarter.

    At least `per_period` per trajectory period and, with `max_displacement`
    given, no step moves the block further than that.
    """
    a, b = cell.quarter
    count = max(int(np.ceil(per_period * (b - a) / cell.period.period)) + 1, minimum)
    if max_displacement is not None:
        top_speed = cell.cutoff.sup([cell.plateau[0]]) / cell.r.inf
        count = max(count, int(np.ceil(top_speed * (b - a) / max_displacement)) + 1)
    count += 1 - count % 2
    return np.linspace(a, b, count)


def verify_cancellation(profile: AuxiliaryProfile, cell: StageCell, per_period: int = 32,
                        max_displacement: Optional[float] = None) -> CancellationResult:
    """P_tau U against div(a xi (x) xi); G = R0(P_tau U - div(a xi (x) xi)).

    The quarter is integrated with composite Simpson; U vanishes on the rest of T^k.
    Steps move the block by at most half a grid cell unless `max_displacement` says otherwise,
    so every resolved Fourier mode of the moving profile is integrated without aliasing.
    """
    if cell.period.count < 1:
        raise ResolutionError(f"trajectory period {cell.period.period:.3e} exceeds the plateau of the cell")
    grid = profile.grid
    step = 0.5 * grid.spacing if max_displacement is None else max_displacement
    times = cell_samples(cell, per_period, max_displacement=step)
    weights = quadrature_weights(times, 'simpson')
    centers = np.array([cell.trajectory.position(float(t)) for t in times])
    coefficients = np.array([cell.coefficient(float(t)) for t in times])
    squares = np.array([cell.squared_weight(float(t)) for t in times])

    xi = cell.direction
    k1, k2 = grid.wavenumbers
    base = profile.field.spectrum
    integral = base * _moving_integral(grid, weights, coefficients, centers)
    U_integral = TorusVectorField.from_spectrum(grid, integral[None] * xi[:, None, None])
    swept = base * _moving_integral(grid, weights, squares, centers)
    d_xi = 1j * (k1 * xi[0] + k2 * xi[1])
    by_parts = TorusVectorField.from_spectrum(grid, (d_xi * swept)[None] * xi[:, None, None])

    tau = cell.partition.tau
    averaged = U_integral / tau
    target = tensor_divergence(TorusSymTensorField.from_rank_one(cell.amplitude, xi))
    defect = averaged - target
    mean_defect = np.asarray(defect.mean(), dtype=float)
    G = symmetric_antidiv_torus(remove_mean(defect))

    a = cell.amplitude
    a_c1 = float(np.max(np.abs(a.values)) + np.max(gradient(a).pointwise_norm()))
    g_l1 = lp_norm(G, 1.0)
    identity_scale = max(lp_norm(U_integral, np.inf), 1e-300)
    report = {
        'lambda': float(cell.directions.lam),
        'direction': cell.i + 1,
        'samples': int(times.size),
        'periods': int(cell.period.count),
        'G_l1': g_l1,
        'a_c1_over_lambda': a_c1 / cell.directions.lam,
        'ratio': g_l1 / (a_c1 / cell.directions.lam),
        'identity_residual': lp_norm(U_integral - by_parts, np.inf) / identity_scale,
        'mean_defect': float(np.max(np.abs(mean_defect))),
        'closure_defect': cell.closure_defect(),
    }
    return CancellationResult(averaged, target, G, report)


def matched_radius(amplitude: TorusScalarField, directions: DirectionSet, i: int, partition: TimePartition,
                   ramp_periods: float = 1.0) -> float:
    """r_next whose trajectory period is ramp_width / ramp_periods, rounded so the plateau holds whole periods.

    The period is linear in r_next, so one bookkeeping pass at a trial radius fixes it;
    the result scales as lambda^-2.
    """
    trial = 1.0 / directions.lam ** 2
    info = build_cell(amplitude, directions, i, 0, partition, trial).period
    count = max(int(round(ramp_periods * info.plateau_length / partition.ramp_width)), 1)
    # shaved so the floor in the bookkeeping lands on `count`
    return trial * info.plateau_length / (info.period * count) * (1.0 - 1e-12)


def cancellation_sweep(amplitude: TorusScalarField, lams: Sequence[int], tau: float, i: int = 0,
                       ramp_periods: float = 1.0, per_period: int = 32,
                       ode_tol: float = SWEEP_ODE_TOL) -> pd.DataFrame:
    """Cancellation report for several lambda at fixed amplitude.

    r_next follows matched_radius, so every lambda sees the same number of
    trajectory periods per ramp and whole periods on the plateau.
    """
    rows = []
    for lam in lams:
        directions = DirectionSet(int(lam))
        partition = TimePartition(tau, int(lam))
        r_next = matched_radius(amplitude, directions, i, partition, ramp_periods)
        cell = build_cell(amplitude, directions, i, 0, partition, r_next, ode_tol, 'DOP853')
        profile = build_auxiliary(amplitude.grid, int(lam), directions.lattice[i])
        rows.append({**verify_cancellation(profile, cell, per_period).report, 'r_next': r_next})
    return pd.DataFrame(rows)


def decay_slope(sweep: pd.DataFrame) -> float:
    """Log-log slope of ||G||_1 against lambda."""
    return float(np.polyfit(np.log(sweep['lambda']), np.log(sweep['G_l1']), 1)[0])


def cancellation_checks(amplitude: TorusScalarField, lams: Sequence[int], tau: float, rng: np.random.Generator,
                        i: int = 0, ramp_periods: float = 1.0, per_period: int = 32,
                        identity_tol: float = 1e-8, slope_tol: float = 0.15) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Sweep table and its checks: unit line averages, closure, integration by parts and 1/lambda decay.

    The decay row holds |slope + 1|, so it fails for decay that is too slow and too fast alike.
    """
    sweep = cancellation_sweep(amplitude, lams, tau, i, ramp_periods, per_period)
    line_defect = 0.0
    for lam in lams:
        profile = build_auxiliary(amplitude.grid, int(lam), DirectionSet(int(lam)).lattice[i])
        line_defect = max(line_defect, profile.line_average_defect(rng))
    rows = [
        ('line_average_defect', line_defect, 1e-8),
        ('closure_defect', sweep['closure_defect'].max(), 1e-8),
        ('identity_residual', sweep['identity_residual'].max(), identity_tol),
        ('min_periods_gap', 1.0 - sweep['periods'].min(), 0.0),
    ]
    if len(sweep) >= 2:
        rows.append(('decay_slope_offset', abs(decay_slope(sweep) + 1.0), slope_tol))
    return sweep, checks_frame(rows)


# ---------------------------------------------------------------------------
# Time corrector
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TimeCorrector:
    """Q with its exact rate -P(U - P_tau U) and the pressure part -Lap^-1 div(U - P_tau U)."""
    field: SpaceTimeField
    rate: SpaceTimeField
    pressure: SpaceTimeField
    averaged: SpaceTimeField


def build_time_corrector(U: SpaceTimeField, partition: TimePartition) -> TimeCorrector:
    """-Q(t) = P int_{k tau}^t (U - P_tau U) ds, restarted at every k tau."""
    averaged = time_average(U, partition)
    fluctuation = U - averaged
    times = U.times
    eps = 1e-9 * partition.tau
    Q = np.zeros_like(U.values)
    k_lo, k_hi = partition.interval_range(times)
    for k in range(k_lo, k_hi + 1):
        a, b = partition.interval(k)
        index = np.flatnonzero((times >= a - eps) & (times <= b + eps))
        running = cumulative_trapezoid(fluctuation.values[index], times[index], axis=0, initial=0.0)
        for j, value in zip(index, running):
            Q[j] = -leray_project(TorusVectorField(U.grid, value)).values
    rate = fluctuation.map(lambda f: -leray_project(f))
    pressure = fluctuation.map(lambda f: gradient_potential(f) * -1.0)
    return TimeCorrector(SpaceTimeField(times, Q, U.grid, TorusVectorField), rate, pressure, averaged)


def corrector_table(corrector: TimeCorrector, partition: TimePartition) -> pd.DataFrame:
    """Boundary values, divergence and rate bounds of Q per sample."""
    rows = []
    eps = 1e-9 * partition.tau
    for j, t in enumerate(corrector.field.times):
        Q = corrector.field.frame(j)
        on_boundary = abs(t / partition.tau - round(t / partition.tau)) * partition.tau <= eps
        rows.append({
            'time': float(t),
            'boundary': bool(on_boundary),
            'q_max': lp_norm(Q, np.inf),
            'divergence_max': lp_norm(divergence(Q), np.inf),
            'rate_l2': lp_norm(corrector.rate.frame(j), 2.0),
        })
    return pd.DataFrame(rows)
