"""
Moving Building Block
A Lamb-Chaplygin block of variable size and speed travelling along a
periodic line on the torus.

The center solves x'(t) = eta(t) xi / r(x(t)). With W_r the rotated and
smoothed constant-speed block,

    V^p = eta W_{r(x(t))}(x - x(t)),   V^c = -grad Lap^-1 div V^p,
    S   = W_r(x - x(t)) / r,           P = d_t Lap^-1 div V^p + eta^2 P1 - eta r' P2,
    F   = R0(eta^2 div F1 + eta r' div F2) + V^p (x) V^c + V^c (x) V^p + V^c (x) V^c,

so that d_t V + div(V (x) V) + grad P = S d/dt(eta r) + div F.
"""

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp

from anti_divergence import symmetric_antidiv_torus
from config import ODE_TOL
from lamb_chaplygin import BlockProfile, DipoleParams, speed_sampling_defect
from report_writer import checks_frame
from spectral_torus import (
    SpaceTimeField, TorusGrid, TorusMatrixField, TorusScalarField, TorusSymTensorField, TorusVectorField,
    divergence, evaluate_spectral, gradient, gradient_potential, interpolate_bilinear, lp_norm,
    mollify_space, remove_mean, sample, space_time_norm, symmetric_product, tensor_divergence,
    tensor_square,
)
from stress_decomposition import TimePartition

MAX_SCALE = 1.0 / 9.0
FD_FRACTION = 1e-5


class TrajectoryError(RuntimeError):
    """The trajectory integration failed (typically step-size underflow)."""


@dataclass(frozen=True, eq=False)
class ScaleFunction:
    """Space-dependent block size r(x), positive and below 1/9."""
    field: TorusScalarField
    interpolation: str = 'spectral'

    def __post_init__(self):
        values = self.field.values
        if np.min(values) <= 0:
            raise ValueError(f"scale function must be positive, min = {np.min(values):.3e}")
        if np.max(values) >= MAX_SCALE:
            raise ValueError(f"scale function must stay below 1/9, max = {np.max(values):.3e}")
        if self.interpolation not in ('spectral', 'bilinear'):
            raise ValueError(f"interpolation must be 'spectral' or 'bilinear', got '{self.interpolation}'")

    @classmethod
    def constant(cls, grid: TorusGrid, value: float) -> 'ScaleFunction':
        return cls(TorusScalarField(grid, np.full((grid.resolution,) * 2, float(value))))

    @cached_property
    def gradient(self) -> TorusVectorField:
        return gradient(self.field)

    def _evaluate(self, f: TorusScalarField, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(2, -1)
        if self.interpolation == 'spectral':
            return evaluate_spectral(f, points)
        return interpolate_bilinear(f, points)

    def at(self, point: Sequence[float]) -> float:
        return float(self._evaluate(self.field, point)[0])

    def gradient_at(self, point: Sequence[float]) -> np.ndarray:
        g = self.gradient
        return np.array([self._evaluate(TorusScalarField(g.grid, g.values[i]), point)[0] for i in range(2)])

    @property
    def sup(self) -> float:
        return float(np.max(self.field.values))

    @property
    def inf(self) -> float:
        return float(np.min(self.field.values))


@dataclass(frozen=True)
class TimeCutoff:
    """eta(t) >= 0 with its derivative; zero outside `support`."""
    value: Callable[[float], float]
    derivative: Callable[[float], float]
    support: Tuple[float, float]
    time_scale: float = np.inf

    def __call__(self, t: float) -> float:
        if t < self.support[0] or t > self.support[1]:
            return 0.0
        return float(self.value(t))

    def rate(self, t: float) -> float:
        if t < self.support[0] or t > self.support[1]:
            return 0.0
        return float(self.derivative(t))

    @classmethod
    def constant(cls, level: float, support: Tuple[float, float] = (-np.inf, np.inf)) -> 'TimeCutoff':
        if level < 0:
            raise ValueError(f"cutoff level must be non-negative, got {level}")
        return cls(lambda t: level, lambda t: 0.0, support)

    def scaled(self, factor: float) -> 'TimeCutoff':
        return replace(self, value=lambda t: factor * self.value(t),
                       derivative=lambda t: factor * self.derivative(t))

    def sup(self, times: np.ndarray) -> float:
        return float(max((abs(self(t)) for t in times), default=0.0))


def rotation(direction: Sequence[float]) -> np.ndarray:
    """Rotation matrix taking e1 to the unit vector `direction`."""
    x1, x2 = np.asarray(direction, dtype=float) / np.hypot(*direction)
    return np.array([[x1, -x2], [x2, x1]])


@dataclass(frozen=True)
class Trajectory:
    t0: float
    x0: np.ndarray
    direction: np.ndarray
    side_length: float
    solution: Callable[[float], np.ndarray]
    times: np.ndarray
    points: np.ndarray

    def unwrapped(self, t: float) -> np.ndarray:
        return np.asarray(self.solution(t), dtype=float).reshape(2)

    def position(self, t: float) -> np.ndarray:
        return np.mod(self.unwrapped(t), self.side_length)

    def wrapped_distance(self, t: float, point: Sequence[float]) -> float:
        d = self.position(t) - np.asarray(point, dtype=float)
        d = (d + 0.5 * self.side_length) % self.side_length - 0.5 * self.side_length
        return float(np.hypot(*d))


def solve_trajectory(r: ScaleFunction, eta: TimeCutoff, direction: Sequence[float], t0: float,
                     x0: Sequence[float], t_span: Tuple[float, float], tol: float = ODE_TOL,
                     max_step: float = np.inf, method: str = 'RK45') -> Trajectory:
    """Integrate x' = eta(t) xi / r(x) with dense output (RK45 unless `method` says otherwise)."""
    xi = np.asarray(direction, dtype=float)
    if abs(np.hypot(*xi) - 1.0) > 1e-12:
        raise ValueError(f"direction must be a unit vector, got {xi.tolist()}")
    L = r.field.grid.side_length
    start = np.asarray(x0, dtype=float)

    def rhs(t, x):
        return eta(t) / r.at(np.mod(x, L)) * xi

    pieces = []
    for end in (t_span[0], t_span[1]):
        if end == t0:
            continue
        sol = solve_ivp(rhs, (t0, end), start, method=method, rtol=tol, atol=tol,
                        dense_output=True, max_step=max_step)
        if not sol.success:
            raise TrajectoryError(f"trajectory integration from t={t0} to t={end} failed: {sol.message}")
        pieces.append((min(t0, end), max(t0, end), sol.sol, sol.t, sol.y))

    def solution(t):
        for lo, hi, dense, _, _ in pieces:
            if lo <= t <= hi:
                return dense(t)
        if not pieces:
            return start
        lo, hi, dense, _, _ = min(pieces, key=lambda p: min(abs(t - p[0]), abs(t - p[1])))
        return dense(t)

    times = np.concatenate([p[3] for p in pieces]) if pieces else np.array([t0])
    points = np.concatenate([p[4] for p in pieces], axis=1) if pieces else start.reshape(2, 1)
    order = np.argsort(times)
    return Trajectory(t0, start, xi, L, solution, times[order], points[:, order])


@dataclass(frozen=True, eq=False)
class BlockFrame:
    """All block fields at one time."""
    time: float
    center: np.ndarray
    radius: float
    principal: TorusVectorField
    corrector: TorusVectorField
    velocity: TorusVectorField
    velocity_rate: TorusVectorField
    source: TorusVectorField
    source_rate: float
    pressure: TorusScalarField
    stress: TorusSymTensorField
    mean_defect: np.ndarray
    sampling_defect: float


@dataclass(frozen=True, eq=False)
class MovingBlock:
    r: ScaleFunction
    eta: TimeCutoff
    direction: np.ndarray
    trajectory: Trajectory
    params: DipoleParams
    use_mask: bool = True
    fd_step: Optional[float] = None

    @property
    def grid(self) -> TorusGrid:
        return self.r.field.grid

    @cached_property
    def _rotation(self) -> np.ndarray:
        return rotation(self.direction)

    def profile_at(self, t: float) -> BlockProfile:
        return BlockProfile(replace(self.params, r=self.r.at(self.trajectory.position(t))))

    def _sample(self, evaluator, field_type, center, profile: BlockProfile, kind: str):
        """Sample a rotated plane field around center, zero outside the profile support."""
        K = self._rotation
        radius = profile.params.support_radius

        def rotated(d):
            y = np.einsum('ji,j...->i...', K, d)  # K^T d
            values = np.where(np.hypot(y[0], y[1]) <= radius, evaluator(y), 0.0)
            if kind == 'vector':
                return np.einsum('ij,j...->i...', K, values)
            return values

        return sample(self.grid, rotated, field_type, center, radius)

    def _smooth(self, f):
        ell = self.params.smoothing_ell
        return mollify_space(f, ell) if ell > 0 else f

    def support_radius(self, profile: BlockProfile) -> float:
        """Radius holding the smoothed block: the tensor-product kernel reaches sqrt(2) ell."""
        return profile.params.support_radius + np.sqrt(2.0) * self.params.smoothing_ell

    def principal_at(self, t: float) -> TorusVectorField:
        eta = self.eta(t)
        if eta == 0.0:
            return TorusVectorField.zeros(self.grid)
        center = self.trajectory.position(t)
        profile = self.profile_at(t)
        W = self._sample(profile.velocity, TorusVectorField, center, profile, 'vector')
        return self._smooth(W) * eta

    def principal_rate(self, t: float, step: Optional[float] = None) -> TorusVectorField:
        """d/dt V^p by fourth-order centered differences in time."""
        h = self.step_at(t) if step is None else step
        vals = [self.principal_at(t + m * h) for m in (-2, -1, 1, 2)]
        return (vals[0] - vals[1] * 8.0 + vals[2] * 8.0 - vals[3]) / (12.0 * h)

    def time_scale_at(self, t: float) -> float:
        """Time for the block to cross its own core, capped by the cutoff ramp."""
        r = self.r.at(self.trajectory.position(t))
        eta = max(abs(self.eta(t)), 1e-12)
        return min(r * r / eta, self.eta.time_scale)

    def step_at(self, t: float) -> float:
        if self.fd_step is not None:
            return self.fd_step
        return FD_FRACTION * self.time_scale_at(t)

    def speed_rate(self, t: float) -> Tuple[float, float]:
        """(r'(t), d/dt(eta r)) along the trajectory, from the chain rule."""
        center = self.trajectory.position(t)
        r = self.r.at(center)
        eta = self.eta(t)
        r_prime = eta * float(self.direction @ self.r.gradient_at(center)) / r
        return r_prime, self.eta.rate(t) * r + eta * r_prime

    def frame(self, t: float, step: Optional[float] = None) -> BlockFrame:
        """Block fields at t.

        The closed-form profile satisfies the speed and size identities exactly;
        the defect its samples leave under the spectral operators is smoothed
        and carried in F together with the commutator of the smoothing.
        """
        grid = self.grid
        eta = self.eta(t)
        center = self.trajectory.position(t)
        profile = self.profile_at(t)
        r = profile.r
        r_prime, source_rate = self.speed_rate(t)
        take = lambda evaluator, field_type, kind: self._sample(evaluator, field_type, center, profile, kind)

        W_raw = take(profile.velocity, TorusVectorField, 'vector')
        W = self._smooth(W_raw)
        source = W * (1.0 / r)

        if eta == 0.0:
            zero_v = TorusVectorField.zeros(grid)
            return BlockFrame(t, center, r, zero_v, zero_v, zero_v, zero_v, source, source_rate,
                              TorusScalarField.zeros(grid), TorusSymTensorField.zeros(grid), np.zeros(2), 0.0)

        principal = W * eta
        corrector = -gradient(gradient_potential(principal))
        velocity = principal + corrector

        principal_rate = self.principal_rate(t, step)
        corrector_rate = -gradient(gradient_potential(principal_rate))

        P1_raw = take(profile.speed_pressure, TorusScalarField, 'scalar')
        P2_raw = take(profile.size_pressure, TorusScalarField, 'scalar')
        G1_raw = take(profile.speed_error_divergence, TorusVectorField, 'vector')
        G2_raw = take(profile.size_error_divergence, TorusVectorField, 'vector')
        streamwise = take(lambda y: profile.velocity_gradient(y)[:, 0], TorusVectorField, 'vector')
        P2_gradient = take(profile.size_pressure_gradient, TorusVectorField, 'vector')

        speed_defect = speed_sampling_defect(streamwise, W_raw, P1_raw, G1_raw, r)
        size_defect = gradient(P2_raw) - P2_gradient
        commutator = self._smooth(tensor_square(W_raw, False)) - tensor_square(W, self.use_mask)
        g1 = self._smooth(G1_raw + speed_defect) - tensor_divergence(commutator)
        g2 = self._smooth(G2_raw - size_defect)

        error_divergence = g1 * eta ** 2 + g2 * (eta * r_prime)
        mean_defect = np.asarray(error_divergence.mean(), dtype=float)
        stress = (symmetric_antidiv_torus(remove_mean(error_divergence))
                  + symmetric_product(principal, corrector, self.use_mask)
                  + tensor_square(corrector, self.use_mask))
        pressure = (gradient_potential(principal_rate) + self._smooth(P1_raw) * eta ** 2
                    - self._smooth(P2_raw) * (eta * r_prime))
        scale = max(lp_norm(streamwise, 2.0) / r, 1e-300)
        sampling = lp_norm(speed_defect, 2.0) / scale

        return BlockFrame(t, center, r, principal, corrector, velocity, principal_rate + corrector_rate,
                          source, source_rate, pressure, stress, mean_defect, sampling)


@dataclass(frozen=True, eq=False)
class BlockFields:
    """Space-time samples of an assembled block."""
    principal: SpaceTimeField
    corrector: SpaceTimeField
    velocity: SpaceTimeField
    velocity_rate: SpaceTimeField
    source: SpaceTimeField
    source_rate: np.ndarray
    pressure: SpaceTimeField
    stress: SpaceTimeField
    centers: np.ndarray
    radii: np.ndarray
    support_radii: np.ndarray
    mean_defects: np.ndarray
    sampling_defects: np.ndarray
    use_mask: bool = True

    @property
    def times(self) -> np.ndarray:
        return self.velocity.times


def assemble_block(block: MovingBlock, times: Sequence[float], step: Optional[float] = None) -> BlockFields:
    """Sample every block field at the given times; `step` overrides the time-differencing step."""
    frames = [block.frame(float(t), step) for t in times]
    stack = lambda name: SpaceTimeField.from_frames(times, [getattr(f, name) for f in frames])
    return BlockFields(
        principal=stack('principal'), corrector=stack('corrector'), velocity=stack('velocity'),
        velocity_rate=stack('velocity_rate'), source=stack('source'),
        source_rate=np.array([f.source_rate for f in frames]), pressure=stack('pressure'),
        stress=stack('stress'), centers=np.array([f.center for f in frames]),
        radii=np.array([f.radius for f in frames]),
        support_radii=np.array([block.support_radius(block.profile_at(float(t))) for t in times]),
        mean_defects=np.array([f.mean_defect for f in frames]),
        sampling_defects=np.array([f.sampling_defect for f in frames]),
        use_mask=block.use_mask,
    )


def _exterior_ratio(f: TorusVectorField, center: np.ndarray, radius: float) -> float:
    """max |f| beyond radius (plus one cell) over max |f|."""
    rel = f.grid.relative_coordinates(center)
    outside = np.hypot(rel[0], rel[1]) > radius + f.grid.spacing
    magnitude = f.pointwise_norm()
    peak = float(np.max(magnitude))
    if peak == 0.0 or not outside.any():
        return 0.0
    return float(np.max(magnitude[outside])) / peak


def block_residual(fields: BlockFields) -> pd.DataFrame:
    """Per-time L2 residual of d_t V + div(V (x) V) + grad P - S d/dt(eta r) - div F, and div V.

    The spatial mean of the defect is no divergence and is reported apart,
    as in the stage residual.
    """
    rows = []
    for j, t in enumerate(fields.times):
        V = fields.velocity.frame(j)
        S = fields.source.frame(j)
        transport = tensor_divergence(tensor_square(V, fields.use_mask))
        rate = fields.velocity_rate.frame(j)
        defect = (rate + transport + gradient(fields.pressure.frame(j))
                  - S * fields.source_rate[j] - tensor_divergence(fields.stress.frame(j)))
        residual = lp_norm(remove_mean(defect), 2)
        scale = max(lp_norm(rate, 2), lp_norm(transport, 2), 1e-300)
        integral = S.integral()
        rows.append({
            'time': float(t),
            'residual_l2': residual,
            'relative_residual': residual / scale,
            'scale': scale,
            'mean_defect': float(np.hypot(*defect.mean())),
            'divergence_max': lp_norm(divergence(V), np.inf),
            'source_integral_1': float(integral[0]),
            'source_integral_2': float(integral[1]),
            'source_exterior': _exterior_ratio(S, fields.centers[j], fields.support_radii[j]),
            'sampling_defect': float(fields.sampling_defects[j]),
        })
    return pd.DataFrame(rows)


def time_refinement(block: MovingBlock, times: Sequence[float], base_step: float,
                    halvings: int = 2) -> pd.DataFrame:
    """Residual over `times` as the differencing step halves; space is spectral, so time dominates."""
    rows = []
    for m in range(halvings + 1):
        step = base_step / 2 ** m
        fields = assemble_block(block, times, step)
        residual = block_residual(fields)
        total = float(np.sqrt(np.sum(residual['residual_l2'] ** 2)))
        scale = float(np.sqrt(np.sum(residual['scale'] ** 2)))
        rows.append({'step': step, 'residual_l2': total, 'relative_residual': total / max(scale, 1e-300)})
    return pd.DataFrame(rows)


def measure_block_norms(fields: BlockFields, r: ScaleFunction, eta: TimeCutoff,
                        exponents: Sequence[float] = (1.5, 2.0, 3.0)) -> pd.DataFrame:
    """Measured norms next to the parameter combinations that bound them."""
    times = fields.times
    eta_sup = eta.sup(times)
    eta_rate_sup = float(max((abs(eta.rate(t)) for t in times), default=0.0))
    r_vals = r.field.values
    grad_r = np.max(r.gradient.pointwise_norm())
    grad_log_r = np.max(r.gradient.pointwise_norm() / r_vals)
    block_radii = fields.radii

    rows = [{
        'quantity': 'F', 'p': 1.0,
        'measured': space_time_norm(fields.stress, 'sup', 1.0),
        'predicted_combination': eta_sup ** 2 * np.max(r_vals) ** 0.5 * (1.0 + grad_log_r),
    }]
    for p in exponents:
        dv = max((_gradient_norm(fields.velocity.frame(j), p) for j in range(len(times))), default=0.0)
        source = max((lp_norm(fields.source.frame(j), p) for j in range(len(times))), default=0.0)
        rows += [
            {'quantity': 'V', 'p': p, 'measured': space_time_norm(fields.velocity, 'sup', p),
             'predicted_combination': eta_sup * np.max(r_vals ** (2.0 / p - 1.0))},
            {'quantity': 'DV', 'p': p, 'measured': dv,
             'predicted_combination': eta_sup * np.max(r_vals ** (2.0 / p - 2.0))},
            {'quantity': 'dtV', 'p': p, 'measured': space_time_norm(fields.velocity_rate, 'sup', p),
             'predicted_combination': eta_sup ** 2 * np.max(r_vals ** -3.0) * (1.0 + grad_r)
             + eta_rate_sup * np.max(r_vals ** -1.0)},
            {'quantity': 'S', 'p': p, 'measured': source,
             'predicted_combination': float(np.max(block_radii ** (2.0 / p - 2.0)))},
        ]
    table = pd.DataFrame(rows, columns=['quantity', 'p', 'measured', 'predicted_combination'])
    combination = table['predicted_combination'].to_numpy()
    table['ratio'] = np.where(combination > 0, table['measured'] / np.where(combination > 0, combination, 1.0), 0.0)
    return table


def _gradient_norm(V: TorusVectorField, p: float) -> float:
    """L^p norm of the Frobenius norm of DV."""
    rows = [gradient(TorusScalarField(V.grid, V.values[i])).values for i in range(2)]
    return lp_norm(TorusMatrixField(V.grid, np.concatenate(rows)), p)


def toy_block(grid: TorusGrid, radius: float, smoothing_ell: float, alpha: float,
              lam: int = 16, tau: float = 1.0 / 16.0, level: float = 1.0, use_mask: bool = True) -> MovingBlock:
    """Block along e1 over the first quarter interval, with r = radius (3 + sin x1 cos x2) / 4."""
    x = 2.0 * np.pi * grid.coordinates / grid.side_length
    r = ScaleFunction(TorusScalarField(grid, radius * (0.75 + 0.25 * np.sin(x[0]) * np.cos(x[1]))))
    partition = TimePartition(tau, lam)
    quarter = partition.quarter(0, 0)
    eta = TimeCutoff(lambda t: level * float(partition.cutoff(0, 0, t)),
                     lambda t: level * float(partition.cutoff_with_rate(0, 0, t)[1]),
                     quarter, partition.ramp_width)
    half = 0.5 * grid.side_length
    trajectory = solve_trajectory(r, eta, (1.0, 0.0), quarter[0], (half, half), quarter,
                                  max_step=partition.ramp_width / 8.0)
    params = DipoleParams(r=radius, alpha=alpha, smoothing_ell=smoothing_ell)
    return MovingBlock(r, eta, np.array([1.0, 0.0]), trajectory, params, use_mask)


def verify_block(block: MovingBlock, samples: int = 8, residual_tol: float = 1e-5,
                 divergence_tol: float = 1e-10, source_tol: float = 1e-5, exterior_tol: float = 1e-12,
                 refinement_fraction: float = 0.05,
                 halvings: int = 2) -> Tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """Residual table, norm table and checks of a block sampled inside its cutoff's support.

    The refinement check restarts from a coarse step (a fraction of the core
    crossing time) and requires the residual to drop at least 4x over `halvings` halvings.
    """
    a, b = block.eta.support
    times = np.linspace(a, b, samples + 2)[1:-1]
    fields = assemble_block(block, times)
    residual = block_residual(fields)
    norms = measure_block_norms(fields, block.r, block.eta)

    target = 2.0 * np.pi * block.direction
    source_error = np.hypot(residual['source_integral_1'] - target[0],
                            residual['source_integral_2'] - target[1]) / (2.0 * np.pi)
    base_step = refinement_fraction * min(block.time_scale_at(float(t)) for t in times)
    refinement = time_refinement(block, times, base_step, halvings)
    first, last = refinement['relative_residual'].iloc[0], refinement['relative_residual'].iloc[-1]
    decay = last / first if first > 0 else 0.0

    checks = checks_frame([
        ('relative_residual', residual['relative_residual'].max(), residual_tol),
        ('divergence_max', residual['divergence_max'].max(), divergence_tol),
        ('max_block_radius', float(np.max(fields.radii)), MAX_SCALE),
        ('source_integral', float(source_error.max()), source_tol),
        ('source_support', residual['source_exterior'].max(), exterior_tol),
        ('time_refinement_decay', decay, 0.25),
    ])
    return residual, norms, checks
