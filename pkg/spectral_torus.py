"""
Spectral Torus
Periodic-grid field algebra on the square torus [0, L)^2: FFT transforms,
differential operators, inverse Laplacian, Leray projection, norms,
mollification and vorticity.

Samples sit at x = (i, j) * L / N with array axis 0 along x1 and axis 1
along x2. Symmetric tensors store (T11, T12, T22). The Nyquist modes are
treated like the mean: first derivatives annihilate them, so div, grad and
the Laplacian compose exactly.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple, Type, Union

import numpy as np
from scipy import fft
from scipy.integrate import trapezoid


class ResolutionError(ValueError):
    """A length or time scale is too small for the sampling."""


class MeanError(ValueError):
    """A mean-zero precondition is violated."""


@dataclass(frozen=True)
class TorusGrid:
    side_length: float = 1.0
    resolution: int = 256

    def __post_init__(self):
        if self.resolution < 8 or self.resolution % 2:
            raise ValueError(f"Grid resolution must be even and >= 8, got {self.resolution}")
        if not self.side_length > 0:
            raise ValueError(f"Side length must be positive, got {self.side_length}")

    @property
    def spacing(self) -> float:
        return self.side_length / self.resolution

    @property
    def cell_area(self) -> float:
        return self.spacing ** 2

    @property
    def area(self) -> float:
        return self.side_length ** 2

    @cached_property
    def axis(self) -> np.ndarray:
        return np.arange(self.resolution) * self.spacing

    @cached_property
    def coordinates(self) -> np.ndarray:
        """Array (2, N, N) of sample positions."""
        x1, x2 = np.meshgrid(self.axis, self.axis, indexing='ij')
        return np.stack([x1, x2])

    @cached_property
    def mode_numbers(self) -> np.ndarray:
        """Integer mode numbers (2, N, N) in FFT order."""
        n = np.fft.fftfreq(self.resolution, d=1.0 / self.resolution)
        n1, n2 = np.meshgrid(n, n, indexing='ij')
        return np.stack([n1, n2])

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Derivative symbols (2, N, N); the Nyquist row/column is zeroed."""
        k = 2.0 * np.pi / self.side_length * self.mode_numbers
        nyquist = np.abs(self.mode_numbers) == self.resolution // 2
        return np.where(nyquist, 0.0, k)

    @cached_property
    def k_squared(self) -> np.ndarray:
        return self.wavenumbers[0] ** 2 + self.wavenumbers[1] ** 2

    @cached_property
    def inverse_k_squared(self) -> np.ndarray:
        k2 = self.k_squared
        safe = np.where(k2 > 0, k2, 1.0)
        return np.where(k2 > 0, 1.0 / safe, 0.0)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """2/3-rule mask: keep |n| < N/3 along both axes."""
        cutoff = self.resolution / 3.0
        return (np.abs(self.mode_numbers[0]) < cutoff) & (np.abs(self.mode_numbers[1]) < cutoff)

    def wrap(self, displacement: np.ndarray) -> np.ndarray:
        """Nearest periodic image of a displacement, in [-L/2, L/2)."""
        L = self.side_length
        return (displacement + 0.5 * L) % L - 0.5 * L

    def relative_coordinates(self, center: Sequence[float]) -> np.ndarray:
        """Wrapped displacements x - center at every sample, shape (2, N, N)."""
        c = np.asarray(center, dtype=float).reshape(2, 1, 1)
        return self.wrap(self.coordinates - c)


@dataclass(frozen=True, eq=False)
class TorusField:
    """Samples of a periodic field; subclasses fix the component count."""
    grid: TorusGrid
    values: np.ndarray
    components = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, 'values', values)
        if values.shape != self.shape_for(self.grid):
            raise ValueError(
                f"{type(self).__name__} expects shape {self.shape_for(self.grid)}, got {values.shape}"
            )

    @classmethod
    def shape_for(cls, grid: TorusGrid) -> tuple:
        N = grid.resolution
        return (N, N) if cls.components == 1 else (cls.components, N, N)

    @classmethod
    def zeros(cls, grid: TorusGrid) -> 'TorusField':
        return cls(grid, np.zeros(cls.shape_for(grid)))

    @cached_property
    def spectrum(self) -> np.ndarray:
        return fft.fft2(self.values, axes=(-2, -1))

    @classmethod
    def from_spectrum(cls, grid: TorusGrid, spectrum: np.ndarray) -> 'TorusField':
        return cls(grid, fft.ifft2(spectrum, axes=(-2, -1)).real)

    def _check_compatible(self, other: 'TorusField'):
        if type(other) is not type(self):
            raise TypeError(f"Cannot combine {type(self).__name__} with {type(other).__name__}")
        if other.grid != self.grid:
            raise TypeError("Fields live on different grids")

    def __add__(self, other):
        self._check_compatible(other)
        return type(self)(self.grid, self.values + other.values)

    def __sub__(self, other):
        self._check_compatible(other)
        return type(self)(self.grid, self.values - other.values)

    def __neg__(self):
        return type(self)(self.grid, -self.values)

    def __mul__(self, factor):
        if isinstance(factor, TorusScalarField):
            if factor.grid != self.grid:
                raise TypeError("Fields live on different grids")
            factor = factor.values
        return type(self)(self.grid, self.values * factor)

    __rmul__ = __mul__

    def __truediv__(self, factor: float):
        return type(self)(self.grid, self.values / factor)

    def mean(self) -> np.ndarray:
        """Space average of every component."""
        return self.values.mean(axis=(-2, -1))

    def integral(self) -> np.ndarray:
        return self.mean() * self.grid.area

    def pointwise_norm(self) -> np.ndarray:
        return np.abs(self.values)


class TorusScalarField(TorusField):
    components = 1


class TorusVectorField(TorusField):
    components = 2

    def pointwise_norm(self) -> np.ndarray:
        return np.hypot(self.values[0], self.values[1])


class TorusSymTensorField(TorusField):
    components = 3

    def pointwise_norm(self) -> np.ndarray:
        """Frobenius norm; the off-diagonal entry counts twice."""
        t11, t12, t22 = self.values
        return np.sqrt(t11 ** 2 + 2.0 * t12 ** 2 + t22 ** 2)

    def matrix(self) -> np.ndarray:
        """Full (2, 2, N, N) array."""
        t11, t12, t22 = self.values
        return np.array([[t11, t12], [t12, t22]])

    @classmethod
    def from_rank_one(cls, amplitude: 'TorusScalarField', direction: Sequence[float]) -> 'TorusSymTensorField':
        """amplitude * xi (x) xi."""
        x1, x2 = direction
        a = amplitude.values
        return cls(amplitude.grid, np.stack([a * x1 * x1, a * x1 * x2, a * x2 * x2]))

    @classmethod
    def identity(cls, amplitude: 'TorusScalarField') -> 'TorusSymTensorField':
        a = amplitude.values
        return cls(amplitude.grid, np.stack([a, np.zeros_like(a), a]))


class TorusMatrixField(TorusField):
    """General 2x2 tensor stored row-major as (A11, A12, A21, A22)."""
    components = 4

    def pointwise_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values ** 2, axis=0))

    def symmetric_part(self) -> TorusSymTensorField:
        a11, a12, a21, a22 = self.values
        return TorusSymTensorField(self.grid, np.stack([a11, 0.5 * (a12 + a21), a22]))

    def antisymmetric_defect(self) -> np.ndarray:
        """A12 - A21 per sample."""
        return self.values[1] - self.values[2]


FieldType = Type[TorusField]


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Frames of one field type sampled at increasing times."""
    times: np.ndarray
    values: np.ndarray
    grid: TorusGrid
    field_type: FieldType

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, 'times', times)
        if times.ndim != 1 or (times.size > 1 and np.any(np.diff(times) <= 0)):
            raise ValueError("Sample times must be strictly increasing")
        expected = (times.size,) + self.field_type.shape_for(self.grid)
        if self.values.shape != expected:
            raise ValueError(f"SpaceTimeField expects shape {expected}, got {self.values.shape}")

    @classmethod
    def from_frames(cls, times: Sequence[float], frames: Sequence[TorusField]) -> 'SpaceTimeField':
        if not frames:
            raise ValueError("At least one frame is required")
        grid = frames[0].grid
        kind = type(frames[0])
        for frame in frames:
            if frame.grid != grid or type(frame) is not kind:
                raise TypeError("All frames must share one grid and one field type")
        return cls(np.asarray(times, dtype=float), np.stack([f.values for f in frames]), grid, kind)

    @classmethod
    def zeros_like(cls, other: 'SpaceTimeField', field_type: Optional[FieldType] = None) -> 'SpaceTimeField':
        kind = field_type or other.field_type
        shape = (other.times.size,) + kind.shape_for(other.grid)
        return cls(other.times, np.zeros(shape), other.grid, kind)

    def __len__(self) -> int:
        return self.times.size

    def frame(self, j: int) -> TorusField:
        return self.field_type(self.grid, self.values[j])

    def frames(self) -> List[TorusField]:
        return [self.frame(j) for j in range(len(self))]

    def map(self, operation: Callable[[TorusField], TorusField]) -> 'SpaceTimeField':
        return SpaceTimeField.from_frames(self.times, [operation(f) for f in self.frames()])

    def restrict(self, mask: np.ndarray) -> 'SpaceTimeField':
        return SpaceTimeField(self.times[mask], self.values[mask], self.grid, self.field_type)

    def _combine(self, other: 'SpaceTimeField', sign: float) -> 'SpaceTimeField':
        if other.field_type is not self.field_type or other.grid != self.grid:
            raise TypeError("Space-time fields must share grid and field type")
        if other.times.shape != self.times.shape or not np.allclose(other.times, self.times):
            raise ValueError("Space-time fields must share sample times")
        return SpaceTimeField(self.times, self.values + sign * other.values, self.grid, self.field_type)

    def __add__(self, other):
        return self._combine(other, 1.0)

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __mul__(self, factor: float):
        return SpaceTimeField(self.times, self.values * factor, self.grid, self.field_type)

    __rmul__ = __mul__

    @property
    def time_step(self) -> float:
        steps = np.diff(self.times)
        if steps.size == 0:
            raise ResolutionError("A single sample has no time step")
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ResolutionError("Time sampling is not uniform")
        return float(steps[0])


AnyField = Union[TorusField, SpaceTimeField]


def _derivative(field_: TorusField, direction: int) -> np.ndarray:
    k = field_.grid.wavenumbers[direction]
    return fft.ifft2(1j * k * field_.spectrum, axes=(-2, -1)).real


def gradient(f: TorusScalarField) -> TorusVectorField:
    return TorusVectorField(f.grid, np.stack([_derivative(f, 0), _derivative(f, 1)]))


def perp_gradient(f: TorusScalarField) -> TorusVectorField:
    """(-d2 f, d1 f)."""
    return TorusVectorField(f.grid, np.stack([-_derivative(f, 1), _derivative(f, 0)]))


def divergence(v: TorusVectorField) -> TorusScalarField:
    k1, k2 = v.grid.wavenumbers
    spec = 1j * (k1 * v.spectrum[0] + k2 * v.spectrum[1])
    return TorusScalarField.from_spectrum(v.grid, spec)


def tensor_divergence(T: TorusSymTensorField) -> TorusVectorField:
    """(div T)_i = d_j T_ij."""
    k1, k2 = T.grid.wavenumbers
    s11, s12, s22 = T.spectrum
    spec = np.stack([1j * (k1 * s11 + k2 * s12), 1j * (k1 * s12 + k2 * s22)])
    return TorusVectorField.from_spectrum(T.grid, spec)


def matrix_divergence(A: TorusMatrixField) -> TorusVectorField:
    """(div A)_i = d_j A_ij for a general 2x2 tensor."""
    k1, k2 = A.grid.wavenumbers
    a11, a12, a21, a22 = A.spectrum
    spec = np.stack([1j * (k1 * a11 + k2 * a12), 1j * (k1 * a21 + k2 * a22)])
    return TorusVectorField.from_spectrum(A.grid, spec)


def curl2d(v: TorusVectorField) -> TorusScalarField:
    """d1 v2 - d2 v1."""
    k1, k2 = v.grid.wavenumbers
    spec = 1j * (k1 * v.spectrum[1] - k2 * v.spectrum[0])
    return TorusScalarField.from_spectrum(v.grid, spec)


def vorticity(u: TorusVectorField) -> TorusScalarField:
    return curl2d(u)


def laplacian(f: TorusField) -> TorusField:
    return type(f).from_spectrum(f.grid, -f.grid.k_squared * f.spectrum)


def check_mean_zero(f: TorusField, tol: float = 1e-10, what: str = 'input') -> None:
    """Raise MeanError unless every component mean is zero relative to the field size."""
    scale = max(float(np.max(np.abs(f.values))), 1.0)
    means = np.atleast_1d(f.mean())
    if np.any(np.abs(means) > tol * scale):
        raise MeanError(f"{what} must have zero mean, got {means.tolist()}")


def remove_mean(f: TorusField) -> TorusField:
    mean = f.mean()
    if f.components == 1:
        return type(f)(f.grid, f.values - mean)
    return type(f)(f.grid, f.values - mean[:, None, None])


def inverse_laplacian(f: TorusScalarField, tol: float = 1e-10) -> TorusScalarField:
    """Zero-mean g with Laplacian(g) = f - mean(f)."""
    check_mean_zero(f, tol)
    return TorusScalarField.from_spectrum(f.grid, -f.grid.inverse_k_squared * f.spectrum)


def inverse_laplacian_any(f: TorusField) -> TorusField:
    """Component-wise inverse Laplacian, discarding means silently."""
    return type(f).from_spectrum(f.grid, -f.grid.inverse_k_squared * f.spectrum)


def leray_project(v: TorusVectorField) -> TorusVectorField:
    """Projection onto divergence-free fields; keeps the mean."""
    k1, k2 = v.grid.wavenumbers
    inv = v.grid.inverse_k_squared
    s1, s2 = v.spectrum
    k_dot = (k1 * s1 + k2 * s2) * inv
    spec = np.stack([s1 - k1 * k_dot, s2 - k2 * k_dot])
    return TorusVectorField.from_spectrum(v.grid, spec)


def gradient_potential(v: TorusVectorField) -> TorusScalarField:
    """phi with grad(phi) = v - leray_project(v), i.e. Laplacian^{-1} div v."""
    return inverse_laplacian_any(divergence(v))


def shift(f: TorusField, displacement: Sequence[float]) -> TorusField:
    """f(x - d) for the trigonometric interpolant."""
    k1, k2 = f.grid.wavenumbers
    d1, d2 = displacement
    phase = np.exp(-1j * (k1 * d1 + k2 * d2))
    return type(f).from_spectrum(f.grid, f.spectrum * phase)


def dealias(f: TorusField) -> TorusField:
    return type(f).from_spectrum(f.grid, f.spectrum * f.grid.dealias_mask)


def _product_inputs(v: TorusVectorField, w: TorusVectorField, use_mask: bool):
    if use_mask:
        return dealias(v).values, dealias(w).values
    return v.values, w.values


def symmetric_product(v: TorusVectorField, w: TorusVectorField, use_mask: bool = True) -> TorusSymTensorField:
    """v (x) w + w (x) v; with use_mask the 2/3 rule removes aliasing."""
    a, b = _product_inputs(v, w, use_mask)
    values = np.stack([2.0 * a[0] * b[0], a[0] * b[1] + a[1] * b[0], 2.0 * a[1] * b[1]])
    product = TorusSymTensorField(v.grid, values)
    return dealias(product) if use_mask else product


def tensor_square(v: TorusVectorField, use_mask: bool = True) -> TorusSymTensorField:
    """v (x) v."""
    return symmetric_product(v, v, use_mask) * 0.5


def lp_norm(f: TorusField, p: float) -> float:
    """Trapezoid (periodic) quadrature of |f|^p; p = inf gives the grid maximum."""
    if p < 1:
        raise ValueError(f"Lebesgue exponent must be >= 1, got {p}")
    magnitude = f.pointwise_norm()
    if np.isinf(p):
        return float(np.max(magnitude))
    return float((np.sum(magnitude ** p) * f.grid.cell_area) ** (1.0 / p))


def space_time_norm(F: SpaceTimeField, time_mode: str, p: float) -> float:
    """L^inf_t L^p_x ('sup') or L^1_t L^p_x ('integral') norm."""
    per_time = np.array([lp_norm(F.frame(j), p) for j in range(len(F))])
    if time_mode == 'sup':
        return float(np.max(per_time)) if per_time.size else 0.0
    if time_mode == 'integral':
        return float(trapezoid(per_time, F.times)) if per_time.size > 1 else 0.0
    raise ValueError(f"Unknown time mode '{time_mode}'")


def bump(s: np.ndarray) -> np.ndarray:
    """exp(-1/(1 - s^2)) on |s| < 1, zero elsewhere."""
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    out = np.zeros_like(s)
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def mollifier_symbol(grid: TorusGrid, ell: float) -> np.ndarray:
    """Discrete transform of the unit-mass tensor-product bump of radius ell."""
    if ell < 2.0 * grid.spacing:
        raise ResolutionError(
            f"Mollification scale {ell:.3e} is below two grid spacings ({2 * grid.spacing:.3e})"
        )
    offsets = grid.wrap(grid.axis)
    profile = bump(offsets / ell)
    profile /= profile.sum()
    symbol_1d = fft.fft(profile)
    return np.outer(symbol_1d, symbol_1d)


def time_kernel(step: float, radius: float) -> np.ndarray:
    """Normalized discrete bump weights over 2m + 1 samples."""
    m = int(np.floor(radius / step))
    if m < 2:
        raise ResolutionError(f"Time mollification radius {radius:.3e} spans fewer than two steps of {step:.3e}")
    weights = bump(np.arange(-m, m + 1) * step / radius)
    return weights / weights.sum()


def mollify_space(f: TorusField, ell: float) -> TorusField:
    return type(f).from_spectrum(f.grid, f.spectrum * mollifier_symbol(f.grid, ell))


def mollify(f: AnyField, ell: float, time_radius: Optional[float] = None) -> AnyField:
    """Convolve with the smooth kernel of radius ell in space (and time_radius in time).

    Time convolution is done in 'valid' mode: the output keeps only samples
    whose whole stencil lies inside the input window.
    """
    if ell <= 0:
        raise ValueError(f"Mollification scale must be positive, got {ell}")
    if isinstance(f, TorusField):
        return mollify_space(f, ell)

    symbol = mollifier_symbol(f.grid, ell)
    spectra = fft.fft2(f.values, axes=(-2, -1)) * symbol
    values = fft.ifft2(spectra, axes=(-2, -1)).real
    times = f.times
    if time_radius:
        weights = time_kernel(f.time_step, time_radius)
        m = (weights.size - 1) // 2
        if times.size <= 2 * m:
            raise ResolutionError("Time window is shorter than the time mollifier")
        out = np.zeros((times.size - 2 * m,) + values.shape[1:])
        for offset, w in enumerate(weights):
            out += w * values[offset:offset + out.shape[0]]
        values = out
        times = times[m:times.size - m]
    return SpaceTimeField(times, values, f.grid, f.field_type)


def time_derivative(F: SpaceTimeField) -> SpaceTimeField:
    """Fourth-order centered differences; the two samples at each end are dropped."""
    h = F.time_step
    if len(F) < 5:
        raise ResolutionError("Fourth-order differencing needs at least five samples")
    v = F.values
    d = (v[:-4] - 8.0 * v[1:-3] + 8.0 * v[3:-1] - v[4:]) / (12.0 * h)
    return SpaceTimeField(F.times[2:-2], d, F.grid, F.field_type)


def sample(grid: TorusGrid, evaluator: Callable[[np.ndarray], np.ndarray],
           field_type: FieldType, center: Sequence[float] = (0.0, 0.0),
           support_radius: Optional[float] = None) -> TorusField:
    """Periodize a compactly supported plane function centered at `center`.

    The evaluator takes displacements of shape (2, ...) and returns component
    arrays of shape (k, ...) or (...) for scalars. Images are summed whenever
    the support reaches past half the cell.
    """
    L = grid.side_length
    rel = grid.relative_coordinates(center)
    images = 0
    if support_radius is not None and support_radius >= 0.5 * L:
        images = int(np.ceil(support_radius / L))
    total = np.zeros(field_type.shape_for(grid))
    for m1 in range(-images, images + 1):
        for m2 in range(-images, images + 1):
            offset = np.array([m1 * L, m2 * L]).reshape(2, 1, 1)
            total += np.asarray(evaluator(rel + offset)).reshape(total.shape)
    return field_type(grid, total)


def evaluate_spectral(f: TorusScalarField, points: np.ndarray) -> np.ndarray:
    """Trigonometric interpolant of f at points of shape (2, m), Nyquist modes excluded."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    grid = f.grid
    n = np.fft.fftfreq(grid.resolution, d=1.0 / grid.resolution)
    k = 2.0 * np.pi / grid.side_length * n
    keep = np.abs(n) < grid.resolution // 2
    coeffs = (f.spectrum / grid.resolution ** 2)[np.ix_(keep, keep)]
    k = k[keep]
    e1 = np.exp(1j * np.outer(points[0], k))
    e2 = np.exp(1j * np.outer(points[1], k))
    return np.einsum('mi,ij,mj->m', e1, coeffs, e2).real


def interpolate_bilinear(f: TorusScalarField, points: np.ndarray) -> np.ndarray:
    """Bilinear periodic interpolation at points of shape (2, m)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    N = f.grid.resolution
    s = (points / f.grid.spacing) % N
    i0 = np.floor(s).astype(int)
    t = s - i0
    i1 = (i0 + 1) % N
    i0 %= N
    v = f.values
    return ((1 - t[0]) * (1 - t[1]) * v[i0[0], i0[1]] + t[0] * (1 - t[1]) * v[i1[0], i0[1]]
            + (1 - t[0]) * t[1] * v[i0[0], i1[1]] + t[0] * t[1] * v[i1[0], i1[1]])


def euler_defect(velocity: TorusVectorField, velocity_rate: TorusVectorField,
                 pressure: TorusScalarField, use_mask: bool = True) -> TorusVectorField:
    """du/dt + div(u (x) u) + grad p."""
    return velocity_rate + tensor_divergence(tensor_square(velocity, use_mask)) + gradient(pressure)


@dataclass(frozen=True)
class CompactField:
    """A plane function with compact support, before periodization.

    The evaluator maps points of shape (2, ...) to (components, ...) arrays
    (or (...) for scalars). Calls return exactly zero outside the support ball.
    """
    evaluator: Callable[[np.ndarray], np.ndarray]
    support_radius: float
    components: int = 1
    smoothness: str = 'C11'
    center: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not np.isfinite(self.support_radius) or self.support_radius <= 0:
            raise ValueError(f"support radius must be finite and positive, got {self.support_radius}")
        if self.smoothness not in ('C11', 'smooth'):
            raise ValueError(f"smoothness must be 'C11' or 'smooth', got '{self.smoothness}'")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        c = np.asarray(self.center, dtype=float).reshape((2,) + (1,) * (x.ndim - 1))
        outside = np.hypot(x[0] - c[0], x[1] - c[1]) > self.support_radius
        values = np.asarray(self.evaluator(x), dtype=float)
        return np.where(outside, 0.0, values)

    def sample(self, grid: TorusGrid, field_type: FieldType,
               center: Sequence[float] = (0.0, 0.0)) -> TorusField:
        """Periodized samples with the support centered at `center`."""
        shift_back = np.asarray(self.center, dtype=float).reshape(2, 1, 1)
        return sample(grid, lambda d: self(d + shift_back), field_type, center, self.support_radius)
