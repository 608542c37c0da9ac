"""
Stage Iteration
Parameter schedule, the exact-arithmetic constraint checker, the stage-0
constructors and the stage map (u_q, p_q, R_q) -> (u_{q+1}, p_{q+1}, R_{q+1})
on one interval T^k.

The new triple is

    u_{q+1} = u_l + sum V_i + Q,
    p_{q+1} = p_l - varsigma + sum P_i - Lap^-1 div(U - P_tau U),
    R_{q+1} = R^(t) + G + R^(s) + sum F_i + R^(l) + R^(c),

with R^(t) = sum (a_i^k - a_i) xi_i (x) xi_i, G = R0(P_tau U - sum div(a_i^k xi_i (x) xi_i)),
R^(s) = R0(sum S_i d/dt(eta r) - U), R^(l) = v (x) u_l + u_l (x) v and
R^(c) = Q (x) (u_l + v) + (u_l + v) (x) Q + Q (x) Q.

Usage:
    from iteration import ParameterSchedule, check_constraints, stage0_shear, assemble_stage
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from anti_divergence import symmetric_antidiv_torus
from cancellation import StageCell, build_U, build_auxiliary, build_cell, build_time_corrector
from config import (
    PAPER_EXPONENTS, PAPER_LAMBDA0, RESIDUAL_TOL, TOY_EXPONENTS, TOY_LAMBDA0, RunConfig,
)
from lamb_chaplygin import DipoleParams, cutoff
from moving_block import TrajectoryError, assemble_block
from report_writer import checks_frame
from spectral_torus import (
    ResolutionError, SpaceTimeField, TorusGrid, TorusMatrixField, TorusScalarField, TorusSymTensorField,
    TorusVectorField, check_mean_zero, curl2d, divergence, euler_defect, gradient, lp_norm, mollify,
    remove_mean, space_time_norm, symmetric_product, tensor_divergence, tensor_square,
)
from stress_decomposition import (
    BracketError, DirectionSet, StageCoefficients, TimePartition, decompose_field, interval_averages, reconstruct,
)

IMPROVED_ALPHA = Fraction(1, 3)
IMPROVED_PBAR = Fraction(2001, 2000)
MAX_EXACT_DIGITS = 60
DIVERGENCE_TOL = 1e-8


class ConstructionError(RuntimeError):
    """A sub-step of a stage failed; the message names the stage, direction and interval."""


# ---------------------------------------------------------------------------
# Schedule and constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterSchedule:
    """lambda_q = lambda0^(sigma^q), delta_q = lambda_1^(2 beta) lambda_q^(-beta),
    r_{q+1} = lambda_{q+1}^(-mu), tau_{q+1} = lambda_{q+1}^(-kappa)."""
    lambda0: int
    exponents: Dict[str, Fraction]
    mode: str = 'toy'
    improved: bool = False

    def __post_init__(self):
        if self.mode not in ('paper', 'toy'):
            raise ValueError(f"mode must be 'paper' or 'toy', got '{self.mode}'")
        if self.lambda0 < 2:
            raise ValueError(f"lambda0 must be an integer >= 2, got {self.lambda0}")
        missing = {'beta', 'mu', 'kappa', 'sigma', 'n', 'alpha', 'pbar'} - set(self.exponents)
        if missing:
            raise ValueError(f"schedule is missing exponents {sorted(missing)}")
        sigma = self.exponents['sigma']
        if sigma.denominator != 1 or sigma < 1:
            raise ValueError(f"sigma must be a positive integer, got {sigma}")

    @classmethod
    def from_config(cls, config: RunConfig, improved: bool = False) -> 'ParameterSchedule':
        return cls(config.base_frequency(), config.exponents(), config.mode, improved)

    @classmethod
    def paper(cls, improved: bool = False) -> 'ParameterSchedule':
        return cls(PAPER_LAMBDA0, dict(PAPER_EXPONENTS), 'paper', improved)

    @classmethod
    def toy(cls) -> 'ParameterSchedule':
        return cls(TOY_LAMBDA0, dict(TOY_EXPONENTS), 'toy')

    @property
    def beta(self) -> Fraction:
        return self.exponents['beta']

    @property
    def mu(self) -> Fraction:
        return self.exponents['mu']

    @property
    def kappa(self) -> Fraction:
        return self.exponents['kappa']

    @property
    def sigma(self) -> Fraction:
        return self.exponents['sigma']

    @property
    def n(self) -> Fraction:
        return self.exponents['n']

    @property
    def alpha(self) -> Fraction:
        return self.exponents['alpha']

    @property
    def pbar(self) -> Fraction:
        return IMPROVED_PBAR if self.improved else self.exponents['pbar']

    @property
    def block_alpha(self) -> Fraction:
        return IMPROVED_ALPHA if self.improved else Fraction(1, 5)

    def frequency(self, q: int) -> int:
        """lambda_q as an exact integer."""
        return self.lambda0 ** (int(self.sigma) ** q)

    def log10_frequency(self, q: int) -> float:
        return float(self.sigma) ** q * math.log10(self.lambda0)

    def log10_delta(self, q: int) -> float:
        beta = float(self.beta)
        return 2.0 * beta * self.log10_frequency(1) - beta * self.log10_frequency(q)

    def delta(self, q: int) -> float:
        return 10.0 ** self.log10_delta(q)

    def log10_radius(self, q: int) -> float:
        return -float(self.mu) * self.log10_frequency(q)

    def radius(self, q: int) -> float:
        return 10.0 ** self.log10_radius(q)

    def tau_inverse(self, q: int) -> int:
        """1/tau_q, rounded to the nearest integer so that 1/tau divides time into whole intervals."""
        return max(int(round(10.0 ** (float(self.kappa) * self.log10_frequency(q)))), 1)

    def tau(self, q: int) -> float:
        return 1.0 / self.tau_inverse(q)

    def log10_mollifier(self, q: int) -> float:
        """ell_q = delta_0^(-1/2) lambda_0^(-beta) delta_{q+1} lambda_q^(-n)."""
        beta, n = float(self.beta), float(self.n)
        return (-0.5 * self.log10_delta(0) - beta * self.log10_frequency(0)
                + self.log10_delta(q + 1) - n * self.log10_frequency(q))

    def table(self, depth: int = 3) -> pd.DataFrame:
        rows = []
        for q in range(depth + 1):
            lam = self.frequency(q) if self.log10_frequency(q) <= MAX_EXACT_DIGITS else None
            rows.append({
                'q': q,
                'lambda': str(lam) if lam is not None else f"10^{self.log10_frequency(q):.6g}",
                'log10_lambda': self.log10_frequency(q),
                'log10_delta': self.log10_delta(q),
                'log10_r': self.log10_radius(q),
                'log10_tau': -float(self.kappa) * self.log10_frequency(q),
                'log10_ell': self.log10_mollifier(q),
            })
        return pd.DataFrame(rows)


@dataclass(frozen=True)
class Constraint:
    label: str
    value: Callable[[Dict[str, Fraction]], Fraction]
    sense: str  # '<': value < 0 ; '>': value > 0

    def margin(self, e: Dict[str, Fraction]) -> Fraction:
        v = Fraction(self.value(e))
        return -v if self.sense == '<' else v


CONSTRAINTS = [
    Constraint('5 + 2n/sigma + 2beta - mu < 0',
               lambda e: 5 + 2 * e['n'] / e['sigma'] + 2 * e['beta'] - e['mu'], '<'),
    Constraint('mu - beta - 2 - kappa > 0',
               lambda e: e['mu'] - e['beta'] - 2 - e['kappa'], '>'),
    Constraint('-9/10 + 3n/sigma + 3beta + beta*sigma < 0',
               lambda e: Fraction(-9, 10) + 3 * e['n'] / e['sigma'] + 3 * e['beta'] + e['beta'] * e['sigma'], '<'),
    Constraint('-kappa + 1 + 4n/sigma + 3beta + beta*sigma < 0',
               lambda e: -e['kappa'] + 1 + 4 * e['n'] / e['sigma'] + 3 * e['beta'] + e['beta'] * e['sigma'], '<'),
    Constraint('-5 + n/sigma + beta < 0',
               lambda e: -5 + e['n'] / e['sigma'] + e['beta'], '<'),
    Constraint('-beta(-8/5 + 2/pbar) + mu(2 - 2/pbar) < 0',
               lambda e: -e['beta'] * (Fraction(-8, 5) + 2 / e['pbar']) + e['mu'] * (2 - 2 / e['pbar']), '<'),
    Constraint('3n/sigma + 9beta/10 - kappa + 3 - 2/pbar < 0',
               lambda e: 3 * e['n'] / e['sigma'] + Fraction(9, 10) * e['beta'] - e['kappa'] + 3 - 2 / e['pbar'], '<'),
    Constraint('21beta/10 + 3mu/2 < n',
               lambda e: Fraction(21, 10) * e['beta'] + Fraction(3, 2) * e['mu'] - e['n'], '<'),
    Constraint('3n/sigma + 6beta - kappa + 5/2 < n',
               lambda e: 3 * e['n'] / e['sigma'] + 6 * e['beta'] - e['kappa'] + Fraction(5, 2) - e['n'], '<'),
    Constraint('2beta + 3mu < n',
               lambda e: 2 * e['beta'] + 3 * e['mu'] - e['n'], '<'),
    Constraint('3n/sigma + 3beta + 3/2 < n',
               lambda e: 3 * e['n'] / e['sigma'] + 3 * e['beta'] + Fraction(3, 2) - e['n'], '<'),
]

IMPROVED_TRAJECTORY = Constraint('mu - beta - 3/2 - kappa > 0',
                                 lambda e: e['mu'] - e['beta'] - Fraction(3, 2) - e['kappa'], '>')


def check_constraints(schedule: ParameterSchedule) -> pd.DataFrame:
    """Every inequality evaluated in exact rational arithmetic, with its margin (positive = pass)."""
    e = dict(schedule.exponents)
    constraints = list(CONSTRAINTS)
    if schedule.improved:
        e['pbar'] = IMPROVED_PBAR
        constraints[1] = IMPROVED_TRAJECTORY
    rows = []
    for c in constraints:
        margin = c.margin(e)
        rows.append({'constraint': c.label, 'margin': str(margin), 'margin_float': float(margin),
                     'passed': margin > 0})
    return pd.DataFrame(rows)


def constraint_lines(schedule: ParameterSchedule) -> List[str]:
    table = check_constraints(schedule)
    lines = [f"CONSTRAINTS ({schedule.mode} mode{', improved' if schedule.improved else ''})", '=' * 80]
    for row in table.itertuples(index=False):
        status = 'PASS' if row.passed else 'FAIL'
        lines.append(f"  {status}  {row.constraint:<48} margin {row.margin}")
    lines.append(f"  support exponent alpha = {schedule.alpha}, block alpha = {schedule.block_alpha}")
    return lines


# ---------------------------------------------------------------------------
# Stage state
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StageState:
    """(u_q, p_q, R_q) sampled in time, with the exact time derivative of u_q."""
    q: int
    velocity: SpaceTimeField
    velocity_rate: SpaceTimeField
    pressure: SpaceTimeField
    stress: SpaceTimeField
    use_mask: bool = True
    info: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.velocity.field_type is not TorusVectorField or self.stress.field_type is not TorusSymTensorField:
            raise TypeError("a stage carries a vector velocity and a symmetric tensor stress")

    @property
    def times(self) -> np.ndarray:
        return self.velocity.times

    @property
    def grid(self) -> TorusGrid:
        return self.velocity.grid

    def defect(self, j: int) -> TorusVectorField:
        """d_t u + div(u (x) u) + grad p - div R at sample j."""
        return (euler_defect(self.velocity.frame(j), self.velocity_rate.frame(j), self.pressure.frame(j),
                             self.use_mask)
                - tensor_divergence(self.stress.frame(j)))


def stage_residual(state: StageState) -> pd.DataFrame:
    """Per-sample Euler-Reynolds residual; the spatial mean of the defect is reported separately.

    The relative residual divides by the largest term over the whole window, so
    samples where every term vanishes do not report roundoff ratios.
    """
    rows, scales = [], []
    for j, t in enumerate(state.times):
        defect = state.defect(j)
        u = state.velocity.frame(j)
        scales.append(max(lp_norm(state.velocity_rate.frame(j), 2.0),
                          lp_norm(tensor_divergence(tensor_square(u, state.use_mask)), 2.0),
                          lp_norm(tensor_divergence(state.stress.frame(j)), 2.0)))
        mean = np.asarray(defect.mean(), dtype=float)
        rows.append({
            'time': float(t),
            'residual_l2': lp_norm(remove_mean(defect), 2.0),
            'mean_defect': float(np.hypot(*mean)),
            'divergence_max': lp_norm(divergence(u), np.inf),
        })
    table = pd.DataFrame(rows, columns=['time', 'residual_l2', 'mean_defect', 'divergence_max'])
    table.insert(2, 'relative_residual', table['residual_l2'] / max(max(scales, default=0.0), 1e-300))
    return table


def _constant_pressure(velocity: SpaceTimeField) -> SpaceTimeField:
    return SpaceTimeField.zeros_like(velocity, TorusScalarField)


# ---------------------------------------------------------------------------
# Stage 0
# ---------------------------------------------------------------------------

def start_cutoff(t):
    """chi = 1 for t <= 1/4, 0 for t >= 1/2, and its derivative."""
    value, rate, _ = cutoff(4.0 * np.asarray(t, dtype=float))
    return 1.0 - value, -4.0 * rate


def stage0_shear(schedule: ParameterSchedule, grid: TorusGrid, times: Sequence[float],
                 use_mask: bool = True) -> StageState:
    """u0 = A chi(t) sin(k0 x2) e1 with R0 balancing d_t u0; k0 = 2 pi lambda0 / L, A = lambda0^(3 beta sigma / 4)."""
    lam0 = schedule.lambda0
    k0 = 2.0 * np.pi * lam0 / grid.side_length
    if lam0 >= grid.resolution // 3:
        raise ResolutionError(f"lambda0 = {lam0} is not resolved on a grid of {grid.resolution}")
    amplitude = lam0 ** (0.75 * float(schedule.beta * schedule.sigma))
    x2 = grid.coordinates[1]
    times = np.asarray(times, dtype=float)
    chi, d_chi = start_cutoff(times)
    zero = np.zeros_like(x2)
    u = np.stack([np.stack([amplitude * c * np.sin(k0 * x2), zero]) for c in chi])
    du = np.stack([np.stack([amplitude * d * np.sin(k0 * x2), zero]) for d in d_chi])
    off = np.stack([-amplitude / k0 * d * np.cos(k0 * x2) for d in d_chi])
    R = np.stack([np.stack([zero, o, zero]) for o in off])
    velocity = SpaceTimeField(times, u, grid, TorusVectorField)
    return StageState(0, velocity, SpaceTimeField(times, du, grid, TorusVectorField),
                      _constant_pressure(velocity), SpaceTimeField(times, R, grid, TorusSymTensorField),
                      use_mask, {'amplitude': amplitude, 'stress_scale': amplitude / lam0,
                       'cutoff_rate_max': float(np.max(np.abs(d_chi)))})


def mollification_scale(u: TorusVectorField, eps: float, start: Optional[float] = None) -> float:
    """Largest ell (halving from L/8) with ||u - u * rho_ell||_2 <= eps / 2."""
    grid = u.grid
    ell = start or grid.side_length / 8.0
    while True:
        if ell < 2.0 * grid.spacing:
            raise ResolutionError(f"no resolvable mollification scale brings u within {eps / 2:.3e}")
        if lp_norm(u - mollify(u, ell), 2.0) <= eps / 2.0:
            return ell
        ell /= 2.0


def stage0_endpoints(u_start: TorusVectorField, u_end: TorusVectorField, eps: float,
                     times: Sequence[float], use_mask: bool = True, tol: float = 1e-10) -> StageState:
    """u0 = chi(t) u_start * rho + (1 - chi(t)) u_end * rho, R0 = R0(d_t u0 + div(u0 (x) u0)), p0 = 0."""
    for name, u in (('u_start', u_start), ('u_end', u_end)):
        check_mean_zero(u, tol, name)
        div_max = lp_norm(divergence(u), np.inf)
        if div_max > DIVERGENCE_TOL * max(lp_norm(_gradient_frame(u), np.inf), 1.0):
            raise ValueError(f"{name} must be divergence-free, max |div| = {div_max:.3e}")
    ell = min(mollification_scale(u_start, eps), mollification_scale(u_end, eps))
    a, b = mollify(u_start, ell), mollify(u_end, ell)
    times = np.asarray(times, dtype=float)
    chi, d_chi = start_cutoff(times)
    frames, rates, stresses = [], [], []
    for c, d in zip(chi, d_chi):
        u = a * float(c) + b * float(1.0 - c)
        rate = (a - b) * float(d)
        forcing = rate + tensor_divergence(tensor_square(u, use_mask))
        frames.append(u)
        rates.append(rate)
        stresses.append(symmetric_antidiv_torus(remove_mean(forcing)))
    velocity = SpaceTimeField.from_frames(times, frames)
    return StageState(0, velocity, SpaceTimeField.from_frames(times, rates), _constant_pressure(velocity),
                      SpaceTimeField.from_frames(times, stresses), use_mask,
                      {'ell': ell, 'start_distance': lp_norm(a - u_start, 2.0)})


# ---------------------------------------------------------------------------
# Mollification
# ---------------------------------------------------------------------------

def _square_series(velocity: SpaceTimeField, use_mask: bool) -> SpaceTimeField:
    return velocity.map(lambda u: tensor_square(u, use_mask))


def mollify_stage(state: StageState, ell: float) -> StageState:
    """(u_l, p_l, R_l) = (u * rho, p * rho, R * rho + u_l (x) u_l - (u (x) u) * rho), in space."""
    u_l = mollify(state.velocity, ell)
    smoothed_squares = mollify(_square_series(state.velocity, state.use_mask), ell)
    commutator = _square_series(u_l, state.use_mask) - smoothed_squares
    R_l = mollify(state.stress, ell) + commutator
    info = {'ell': ell, 'commutator_l1': space_time_norm(commutator, 'sup', 1.0),
            'velocity_change_l2': max(lp_norm(u_l.frame(j) - state.velocity.frame(j), 2.0) for j in range(len(u_l)))}
    return StageState(state.q, u_l, mollify(state.velocity_rate, ell), mollify(state.pressure, ell), R_l,
                      state.use_mask, info)


# ---------------------------------------------------------------------------
# Stage assembly on one interval
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyOverrides:
    """Stage settings that replace schedule values on a desk-size grid."""
    delta_next: float
    block_radius: float
    block_alpha: float
    smoothing_ell: float
    r_next: Optional[float] = None
    freeze_prefix: Optional[float] = None

    @classmethod
    def from_config(cls, config: RunConfig, grid: TorusGrid) -> 'ToyOverrides':
        return cls(delta_next=float(config.delta_next), block_radius=config.block_radius,
                   block_alpha=float(config.block_alpha),
                   smoothing_ell=config.smoothing_ell or 4.0 * grid.spacing,
                   r_next=config.r_next, freeze_prefix=config.freeze_prefix)


def cell_times(schedule: ParameterSchedule, q: int, k: int, samples: int) -> np.ndarray:
    """samples + 1 uniform times covering T^k of stage q + 1."""
    tau = schedule.tau(q + 1)
    return np.linspace(k * tau, (k + 1) * tau, samples + 1)


@dataclass(frozen=True, eq=False)
class StageParts:
    """Pieces of an assembled stage, kept for diagnostics."""
    mollified: StageState
    coefficients: StageCoefficients
    cells: List[StageCell]
    perturbation: SpaceTimeField
    corrector: SpaceTimeField
    stress_parts: Dict[str, SpaceTimeField]
    mean_defects: np.ndarray


def _provenance(q: int, i: Optional[int], k: int) -> str:
    where = f"stage {q + 1}, interval {k}"
    return where if i is None else f"{where}, direction {i + 1}"


def assemble_stage(state: StageState, schedule: ParameterSchedule, overrides: ToyOverrides,
                   k: int) -> Tuple[StageState, StageParts]:
    """One stage map on T^k; `state` must be sampled on cell_times of that interval."""
    q = state.q
    grid = state.grid
    lam = schedule.frequency(q + 1)
    tau = schedule.tau(q + 1)
    times = state.times
    if abs(times[0] - k * tau) > 1e-12 or abs(times[-1] - (k + 1) * tau) > 1e-12:
        raise ValueError(f"stage samples must span [{k * tau:g}, {(k + 1) * tau:g}]")

    mollified = mollify_stage(state, overrides.smoothing_ell)
    directions = DirectionSet(int(lam))
    partition = TimePartition(tau, int(lam))
    try:
        coefficients = decompose_field(mollified.stress, directions, overrides.delta_next)
        averages = interval_averages(coefficients, partition, k)
    except (ValueError, ResolutionError) as exc:
        raise ConstructionError(f"{_provenance(q, None, k)}: stress decomposition failed: {exc}") from exc

    frozen = (overrides.freeze_prefix is not None
              and k * tau < overrides.freeze_prefix - 1.0 / schedule.frequency(q))
    r_next = overrides.r_next or overrides.block_radius / max(float(np.max(a.values)) for a in averages)

    zero_v = SpaceTimeField.zeros_like(state.velocity)
    zero_p = SpaceTimeField.zeros_like(state.velocity, TorusScalarField)
    zero_R = SpaceTimeField.zeros_like(state.stress)
    v, v_rate, block_pressure, block_stress, U, source = zero_v, zero_v, zero_p, zero_R, zero_v, zero_v
    cells = []
    if not frozen:
        for i, amplitude in enumerate(averages):
            try:
                cell = build_cell(amplitude, directions, i, k, partition, r_next)
                params = DipoleParams(r=overrides.block_radius, alpha=overrides.block_alpha,
                                      smoothing_ell=overrides.smoothing_ell)
                fields = assemble_block(cell.moving_block(params, state.use_mask), times)
                profile = build_auxiliary(grid, int(lam), directions.lattice[i])
                U = U + build_U(profile, cell, times)
            except (ValueError, BracketError, TrajectoryError) as exc:
                raise ConstructionError(f"{_provenance(q, i, k)}: {exc}") from exc
            cells.append(cell)
            v = v + fields.velocity
            v_rate = v_rate + fields.velocity_rate
            block_pressure = block_pressure + fields.pressure
            block_stress = block_stress + fields.stress
            source = source + SpaceTimeField(times, fields.source.values * fields.source_rate[:, None, None, None],
                                             grid, TorusVectorField)

    corrector = build_time_corrector(U, partition)
    Q = corrector.field
    u_l = mollified.velocity
    mask = state.use_mask

    new_velocity = u_l + v + Q
    new_rate = mollified.velocity_rate + v_rate + corrector.rate
    if frozen:
        new_state = StageState(q + 1, new_velocity, new_rate, mollified.pressure, mollified.stress, mask,
                               {'lambda': float(lam), 'tau': tau, 'frozen': 1.0, 'interval': float(k)})
        return new_state, StageParts(mollified, coefficients, cells, v, Q, {}, np.zeros((len(times), 4)))
    new_pressure = mollified.pressure + coefficients.pressure_defect + block_pressure + corrector.pressure

    a_k = np.stack([a.values for a in averages])
    target = tensor_divergence(TorusSymTensorField(grid, reconstruct(a_k, directions)))
    temporal, cancel, replacement, linear, corr = [], [], [], [], []
    means = []
    for j in range(len(times)):
        a_now = coefficients.amplitude_frame(j)
        temporal.append(TorusSymTensorField(grid, reconstruct(a_k - a_now, directions)))

        cancel_defect = corrector.averaged.frame(j) - target
        swap_defect = source.frame(j) - U.frame(j)
        means.append(np.concatenate([cancel_defect.mean(), swap_defect.mean()]))
        cancel.append(symmetric_antidiv_torus(remove_mean(cancel_defect)))
        replacement.append(symmetric_antidiv_torus(remove_mean(swap_defect)))

        u_j, v_j, Q_j = u_l.frame(j), v.frame(j), Q.frame(j)
        linear.append(symmetric_product(v_j, u_j, mask))
        corr.append(symmetric_product(Q_j, u_j + v_j, mask) + tensor_square(Q_j, mask))

    stack = lambda frames: SpaceTimeField.from_frames(times, frames)
    parts = {
        'temporal': stack(temporal), 'cancellation': stack(cancel), 'source': stack(replacement),
        'blocks': block_stress, 'linear': stack(linear), 'corrector': stack(corr),
    }
    new_stress = (parts['temporal'] + parts['cancellation'] + parts['source'] + parts['blocks']
                  + parts['linear'] + parts['corrector'])

    info = {'lambda': float(lam), 'tau': tau, 'r_next': r_next, 'delta_next': overrides.delta_next,
            'frozen': 0.0, 'interval': float(k)}
    new_state = StageState(q + 1, new_velocity, new_rate, new_pressure, new_stress, mask, info)
    stage_parts = StageParts(mollified, coefficients, cells, v, Q, parts, np.array(means))
    return new_state, stage_parts


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def vorticity_fd(u: TorusVectorField) -> TorusScalarField:
    """Second-order centered differences of d1 u2 - d2 u1."""
    h = u.grid.spacing
    u1, u2 = u.values
    d1u2 = (np.roll(u2, -1, axis=0) - np.roll(u2, 1, axis=0)) / (2.0 * h)
    d2u1 = (np.roll(u1, -1, axis=1) - np.roll(u1, 1, axis=1)) / (2.0 * h)
    return TorusScalarField(u.grid, d1u2 - d2u1)


def _gradient_frame(u: TorusVectorField) -> TorusMatrixField:
    rows = [gradient(TorusScalarField(u.grid, u.values[i])).values for i in range(2)]
    return TorusMatrixField(u.grid, np.concatenate(rows))


def diagnostics(state: StageState, previous: Optional[StageState] = None,
                exponents: Sequence[float] = (1.5, 2.0), pbar: float = float(PAPER_EXPONENTS['pbar']),
                delta_next: Optional[float] = None) -> pd.DataFrame:
    """Per-sample norms of the stage: stress, velocity, gradient, vorticity, energy and the step from `previous`."""
    rows = []
    for j, t in enumerate(state.times):
        u = state.velocity.frame(j)
        omega = curl2d(u)
        row = {
            'time': float(t),
            'stress_l1': lp_norm(state.stress.frame(j), 1.0),
            'velocity_l2': lp_norm(u, 2.0),
            'energy': float(np.sum(u.values ** 2) * state.grid.cell_area),
            'gradient_lpbar': lp_norm(_gradient_frame(u), pbar),
            'vorticity_fd_defect': lp_norm(omega - vorticity_fd(u), np.inf),
        }
        for p in exponents:
            row[f'vorticity_l{p:g}'] = lp_norm(omega, p)
        if previous is not None:
            step = lp_norm(u - previous.velocity.frame(j), 2.0)
            row['step_l2'] = step
            if delta_next:
                row['step_over_sqrt_delta'] = step / np.sqrt(delta_next)
        rows.append(row)
    return pd.DataFrame(rows)


def boundary_deltas(new: StageState, mollified: StageState, tau: float) -> pd.DataFrame:
    """max |u_{q+1} - u_l| at the samples on partition boundaries."""
    rows = []
    for j, t in enumerate(new.times):
        if abs(t / tau - round(t / tau)) * tau <= 1e-9 * tau:
            diff = new.velocity.frame(j) - mollified.velocity.frame(j)
            rows.append({'time': float(t), 'velocity_delta': lp_norm(diff, np.inf)})
    return pd.DataFrame(rows, columns=['time', 'velocity_delta'])


def stage_checks(state: StageState, residual: pd.DataFrame, tol: float = RESIDUAL_TOL,
                 mean_tol: float = 1e-6, divergence_tol: float = 1e-10) -> pd.DataFrame:
    """Pass/fail rows for the Euler-Reynolds residual, its mean part and div u."""
    scale = max(space_time_norm(state.velocity, 'sup', np.inf), 1.0)
    return checks_frame([
        (f'stage{state.q}_relative_residual', residual['relative_residual'].max(), tol),
        (f'stage{state.q}_mean_defect', residual['mean_defect'].max() / scale, mean_tol),
        (f'stage{state.q}_divergence', residual['divergence_max'].max() / scale, divergence_tol),
    ])
