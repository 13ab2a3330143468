import abc
import dataclasses
import enum
import json
import logging
import math
from fractions import Fraction
from typing import Callable, Sequence

import aiofiles
import dataclasses_json
import numpy as np
from dataclasses_json import DataClassJsonMixin

from .consts import FD_STEP_FACTOR, FD_RELATIVE_TOLERANCE, ANNULUS_INNER, ANNULUS_OUTER, \
    BALL_RADIUS, SUPPORTED_DIMENSIONS, METRIC_SAMPLES_PER_AXIS, SYMMETRY_TOLERANCE
from .errors import ConstructionError, ParameterError, UnsupportedRepresentationError
from .utils import array_field, band_cutoff, dump_binary, smooth_step

logger = logging.getLogger(__name__)


class FrequencyCutoff(str, enum.Enum):
    BALL = "ball"
    ANNULUS = "annulus"
    NONE = "none"

    def profile(self, magnitude: np.ndarray) -> np.ndarray:
        magnitude = np.asarray(magnitude, dtype=float)
        if self == FrequencyCutoff.BALL:
            return 1 - smooth_step(magnitude / BALL_RADIUS - 1)
        if self == FrequencyCutoff.ANNULUS:
            inner = smooth_step((magnitude - ANNULUS_INNER / 2) / (ANNULUS_INNER / 2))
            outer = 1 - smooth_step((magnitude - ANNULUS_OUTER) / ANNULUS_OUTER)
            return inner * outer
        return np.ones_like(magnitude)

    @property
    def support_radius(self) -> float:
        if self == FrequencyCutoff.BALL:
            return 2 * BALL_RADIUS
        if self == FrequencyCutoff.ANNULUS:
            return 2 * ANNULUS_OUTER
        return math.inf


@dataclasses.dataclass(frozen=True)
class RegularityMetadata(DataClassJsonMixin):
    eps_reg: float | None = None
    C2: float | None = None
    d1: float | None = None
    d2: float | None = None


@dataclasses.dataclass(frozen=True)
class MetricBounds(DataClassJsonMixin):
    """Eigenvalues lie in [lower, upper] when definite, otherwise their moduli do."""
    lower: float
    upper: float
    definite: bool = True


# Metrics


class MetricField(abc.ABC):
    """Time-independent coefficients g^{ij}(x). Arrays carry the point index first: x has shape (..., d)."""

    def __init__(self, dim: int, bounds: MetricBounds, extent: float, name: str):
        if dim not in SUPPORTED_DIMENSIONS:
            raise ParameterError(f"Unsupported dimension: {dim}")
        self.dim: int = dim
        self.bounds: MetricBounds = bounds
        self.extent: float = extent
        self.name: str = name
        self.constant: bool = False

    @abc.abstractmethod
    def matrix(self, x: np.ndarray) -> np.ndarray:
        """g^{ij}(x), shape (..., d, d)."""
        raise NotImplementedError

    @abc.abstractmethod
    def gradient(self, x: np.ndarray) -> np.ndarray:
        """d_k g^{ij}(x), shape (..., d, d, d) with k last."""
        raise NotImplementedError

    @abc.abstractmethod
    def hessian(self, x: np.ndarray) -> np.ndarray:
        """d_k d_l g^{ij}(x), shape (..., d, d, d, d)."""
        raise NotImplementedError

    @property
    def fourier_data(self) -> 'FourierMetricData | None':
        return None

    def sample_points(self) -> np.ndarray:
        axis = np.linspace(-self.extent, self.extent, METRIC_SAMPLES_PER_AXIS)
        return np.stack(np.meshgrid(*([axis] * self.dim), indexing="ij"), axis=-1).reshape(-1, self.dim)

    def validate(self, points: np.ndarray | None = None):
        points = self.sample_points() if points is None else np.asarray(points, dtype=float)
        g = self.matrix(points)
        scale = max(float(np.max(np.abs(g))), 1.0)
        asymmetry = float(np.max(np.abs(g - np.swapaxes(g, -1, -2))))
        if asymmetry > SYMMETRY_TOLERANCE * scale:
            raise ConstructionError(f"Metric '{self.name}' is not symmetric (max |g - g^T| = {asymmetry:.3g})")
        eigenvalues = np.linalg.eigvalsh(0.5 * (g + np.swapaxes(g, -1, -2)))
        if self.bounds.definite:
            low, high = float(np.min(eigenvalues)), float(np.max(eigenvalues))
        else:
            low, high = float(np.min(np.abs(eigenvalues))), float(np.max(np.abs(eigenvalues)))
        slack = 1e-9 * scale
        if low < self.bounds.lower - slack or high > self.bounds.upper + slack:
            raise ConstructionError(
                f"Metric '{self.name}' eigenvalues [{low:.6g}, {high:.6g}] outside declared bounds "
                f"[{self.bounds.lower:.6g}, {self.bounds.upper:.6g}]"
            )


class AnalyticMetric(MetricField):
    def __init__(
            self,
            dim: int,
            matrix: Callable[[np.ndarray], np.ndarray],
            gradient: Callable[[np.ndarray], np.ndarray],
            hessian: Callable[[np.ndarray], np.ndarray],
            bounds: MetricBounds,
            extent: float = 10.0,
            name: str = "analytic",
    ):
        super().__init__(dim, bounds, extent, name)
        self._matrix = matrix
        self._gradient = gradient
        self._hessian = hessian

    def matrix(self, x: np.ndarray) -> np.ndarray:
        return self._matrix(np.asarray(x, dtype=float))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self._gradient(np.asarray(x, dtype=float))

    def hessian(self, x: np.ndarray) -> np.ndarray:
        return self._hessian(np.asarray(x, dtype=float))


@dataclasses.dataclass(frozen=True, eq=False)
class FourierMetricData(DataClassJsonMixin):
    """Fourier coefficients c^{ij}_m of g^{ij}(x) = Re sum_m c_m e^{i k_m x} on the torus of side 2L."""
    dim: int
    half_width: float
    coefficients: np.ndarray = array_field()

    def __post_init__(self):
        coefficients = np.asarray(self.coefficients, dtype=complex)
        if coefficients.ndim != 2 + self.dim or coefficients.shape[:2] != (self.dim, self.dim):
            raise ParameterError(f"Coefficient array of shape {coefficients.shape} does not fit dimension {self.dim}")
        object.__setattr__(self, "coefficients", coefficients)

    @property
    def mode_counts(self) -> tuple[int, ...]:
        return tuple(self.coefficients.shape[2:])

    def wavenumbers(self) -> list[np.ndarray]:
        return [np.pi * np.fft.fftfreq(m) * m / self.half_width for m in self.mode_counts]

    def radial_wavenumbers(self) -> np.ndarray:
        mesh = np.meshgrid(*self.wavenumbers(), indexing="ij")
        return np.sqrt(sum(k ** 2 for k in mesh))


@dataclasses.dataclass(frozen=True)
class MetricDataHeader(DataClassJsonMixin):
    dim: int
    half_width: float
    mode_counts: tuple[int, ...]
    dtype: str = "<c16"
    layout: str = "row-major, shape (d, d, *mode_counts)"


class FourierMetric(MetricField):
    def __init__(self, data: FourierMetricData, bounds: MetricBounds, name: str = "fourier"):
        super().__init__(data.dim, bounds, data.half_width, name)
        self._data = data

    @property
    def fourier_data(self) -> FourierMetricData:
        return self._data

    def _evaluate(self, x: np.ndarray, orders: Sequence[int]) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        coefficients = self._data.coefficients
        factors = []
        for axis, k in enumerate(self._data.wavenumbers()):
            phase = np.exp(1j * x[..., axis, None] * k)
            factors.append(phase * (1j * k) ** orders[axis])
        if self.dim == 1:
            value = np.einsum("ijm,...m->...ij", coefficients, factors[0])
        else:
            value = np.einsum("ijab,...a,...b->...ij", coefficients, factors[0], factors[1])
        return value.real

    def matrix(self, x: np.ndarray) -> np.ndarray:
        return self._evaluate(x, [0] * self.dim)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.stack([self._evaluate(x, np.eye(self.dim, dtype=int)[k]) for k in range(self.dim)], axis=-1)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        eye = np.eye(self.dim, dtype=int)
        rows = [
            np.stack([self._evaluate(x, eye[k] + eye[m]) for m in range(self.dim)], axis=-1)
            for k in range(self.dim)
        ]
        return np.stack(rows, axis=-2)


def constant_metric(matrix: np.ndarray | float, name: str = "constant") -> AnalyticMetric:
    g = np.atleast_2d(np.asarray(matrix, dtype=float))
    dim = g.shape[0]
    eigenvalues = np.linalg.eigvalsh(0.5 * (g + g.T))
    definite = bool(np.all(eigenvalues > 0))
    magnitudes = eigenvalues if definite else np.abs(eigenvalues)
    bounds = MetricBounds(lower=float(np.min(magnitudes)), upper=float(np.max(magnitudes)), definite=definite)

    def _matrix(x):
        return np.broadcast_to(g, x.shape[:-1] + (dim, dim)).copy()

    def _gradient(x):
        return np.zeros(x.shape[:-1] + (dim,) * 3)

    def _hessian(x):
        return np.zeros(x.shape[:-1] + (dim,) * 4)

    metric = AnalyticMetric(dim, _matrix, _gradient, _hessian, bounds, name=name)
    metric.constant = True
    return metric


def cosine_metric(
        dim: int = 1,
        nu: float = 1.0,
        eps: float = 0.0,
        scale: float = 1.0,
        direction: Sequence[float] | None = None,
) -> AnalyticMetric:
    """g = nu (1 + eps cos(omega . x / scale)) Id with a unit direction omega."""
    if nu <= 0 or scale <= 0:
        raise ParameterError(f"Need nu > 0 and scale > 0, got nu = {nu}, scale = {scale}")
    omega = np.zeros(dim) if direction is None else np.asarray(direction, dtype=float)
    if direction is None:
        omega[0] = 1.0
    omega = omega / np.linalg.norm(omega)
    eye = np.eye(dim)

    def _theta(x):
        return np.tensordot(x, omega, axes=([-1], [0])) / scale

    def _matrix(x):
        return (nu * (1 + eps * np.cos(_theta(x))))[..., None, None] * eye

    def _gradient(x):
        radial = -nu * eps * np.sin(_theta(x)) / scale
        return radial[..., None, None, None] * eye[..., None] * omega

    def _hessian(x):
        radial = -nu * eps * np.cos(_theta(x)) / scale ** 2
        return radial[..., None, None, None, None] * eye[..., None, None] * np.multiply.outer(omega, omega)

    bounds = MetricBounds(lower=nu * (1 - abs(eps)), upper=nu * (1 + abs(eps)), definite=abs(eps) < 1)
    return AnalyticMetric(dim, _matrix, _gradient, _hessian, bounds, extent=math.pi * scale, name=f"cosine(nu={nu:g}, eps={eps:g}, scale={scale:g})")


def perturbed_identity_metric(dim: int, eps: float, R: float, nu: float = 1.0) -> AnalyticMetric:
    return cosine_metric(dim=dim, nu=nu, eps=eps, scale=R)


def fourier_metric(metric: MetricField, half_width: float, modes: int) -> FourierMetric:
    """Sample `metric` on `modes` points per axis of [-L, L)^d and keep its discrete Fourier data."""
    if modes < 2 or modes & (modes - 1) != 0:
        raise ParameterError(f"Mode count must be a power of 2, got {modes}")
    axis = -half_width + 2 * half_width / modes * np.arange(modes)
    points = np.stack(np.meshgrid(*([axis] * metric.dim), indexing="ij"), axis=-1)
    samples = np.moveaxis(metric.matrix(points), (-2, -1), (0, 1))
    spectrum = np.fft.fftn(samples, axes=tuple(range(2, 2 + metric.dim))) / modes ** metric.dim
    k = np.pi * np.fft.fftfreq(modes) * modes / half_width
    shift = np.exp(1j * k * half_width)
    for axis_index in range(metric.dim):
        shape = [1] * (2 + metric.dim)
        shape[2 + axis_index] = modes
        spectrum = spectrum * shift.reshape(shape)
    data = FourierMetricData(dim=metric.dim, half_width=float(half_width), coefficients=spectrum)
    return FourierMetric(data, metric.bounds, name=f"fourier({metric.name})")


def metric_from_data(data: FourierMetricData, name: str = "fourier") -> FourierMetric:
    """Fourier metric whose bounds are measured on its own sample lattice."""
    probe = FourierMetric(data, MetricBounds(lower=0.0, upper=math.inf, definite=False), name=name)
    eigenvalues = np.linalg.eigvalsh(probe.matrix(probe.sample_points()))
    definite = bool(np.all(eigenvalues > 0))
    magnitudes = eigenvalues if definite else np.abs(eigenvalues)
    bounds = MetricBounds(lower=float(np.min(magnitudes)), upper=float(np.max(magnitudes)), definite=definite)
    return FourierMetric(data, bounds, name=name)


def lowpass_metric(metric: MetricField, lambda_cut: float) -> FourierMetric:
    data = metric.fourier_data
    if data is None:
        raise UnsupportedRepresentationError(f"Metric '{metric.name}' has no Fourier data to truncate")
    if lambda_cut <= 0:
        raise ParameterError(f"Cutoff frequency must be positive, got {lambda_cut}")
    multiplier = band_cutoff(data.radial_wavenumbers() / lambda_cut)
    truncated = FourierMetricData(dim=data.dim, half_width=data.half_width, coefficients=data.coefficients * multiplier)
    return FourierMetric(truncated, metric.bounds, name=f"lowpass({metric.name}, {lambda_cut:g})")


async def save_metric_data(data: FourierMetricData, path_prefix: str):
    header = MetricDataHeader(dim=data.dim, half_width=data.half_width, mode_counts=data.mode_counts)
    await dump_binary(f"{path_prefix}.bin", data.coefficients, header)


async def load_metric_data(path_prefix: str) -> FourierMetricData:
    async with aiofiles.open(f"{path_prefix}.json", "r", encoding="utf-8") as f:
        header = MetricDataHeader.from_dict(json.loads(await f.read()))
    async with aiofiles.open(f"{path_prefix}.bin", "rb") as f:
        raw = await f.read()
    shape = (header.dim, header.dim) + tuple(header.mode_counts)
    coefficients = np.frombuffer(raw, dtype="<c16").reshape(shape).copy()
    return FourierMetricData(dim=header.dim, half_width=header.half_width, coefficients=coefficients)


# Symbols


def _shift(args: tuple, var: str, comp: int, h: float) -> tuple:
    x, t, xi = args
    if var == "t":
        return x, t + h, xi
    moved = np.array(x if var == "x" else xi, dtype=float)
    moved[..., comp] += h
    return (moved, t, xi) if var == "x" else (x, t, moved)


def _first_difference(f: Callable, args: tuple, var: str, comp: int, h: float) -> np.ndarray:
    return (
        f(*_shift(args, var, comp, -2 * h)) - 8 * f(*_shift(args, var, comp, -h))
        + 8 * f(*_shift(args, var, comp, h)) - f(*_shift(args, var, comp, 2 * h))
    ) / (12 * h)


def _second_difference(f: Callable, args: tuple, var: str, comp: int, h: float) -> np.ndarray:
    return (
        -f(*_shift(args, var, comp, 2 * h)) + 16 * f(*_shift(args, var, comp, h)) - 30 * f(*args)
        + 16 * f(*_shift(args, var, comp, -h)) - f(*_shift(args, var, comp, -2 * h))
    ) / (12 * h * h)


class SymbolModel(abc.ABC):
    """
    A real Hamiltonian p(x, t, xi). Positions and frequencies are arrays of shape (..., d), time is a scalar
    or broadcastable array. The base class provides 4th-order central differences for every derivative;
    subclasses override them with closed forms where they have them.
    """

    def __init__(
            self,
            dim: int,
            homogeneity: int | None,
            cutoff: FrequencyCutoff,
            scale: float = 1.0,
            name: str = "symbol",
            regularity: RegularityMetadata | None = None,
            time_independent: bool = True,
            x_independent: bool = False,
    ):
        if dim not in SUPPORTED_DIMENSIONS:
            raise ParameterError(f"Unsupported dimension: {dim}")
        if homogeneity not in (1, 2, None):
            raise ParameterError(f"Homogeneity must be 1, 2 or None, got {homogeneity}")
        self.dim: int = dim
        self.homogeneity: int | None = homogeneity
        self.cutoff: FrequencyCutoff = cutoff
        self.scale: float = scale
        self.name: str = name
        self.regularity: RegularityMetadata = regularity if regularity is not None else RegularityMetadata()
        self.time_independent: bool = time_independent
        self.x_independent: bool = x_independent

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name})"

    @abc.abstractmethod
    def value(self, x: np.ndarray, t: float | np.ndarray, xi: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def quantized(self, x: np.ndarray, t: float | np.ndarray, xi: np.ndarray) -> np.ndarray:
        """The symbol times its frequency cutoff, the function that gets Weyl-quantized."""
        xi = np.asarray(xi, dtype=float)
        if self.cutoff == FrequencyCutoff.NONE:
            return self.value(x, t, xi)
        magnitude = np.linalg.norm(xi, axis=-1)
        profile = self.cutoff.profile(magnitude)
        safe = np.where(profile[..., None] > 0, xi, 1.0)
        return np.where(profile > 0, profile * self.value(x, t, safe), 0.0)

    @property
    def _hx(self) -> float:
        return FD_STEP_FACTOR * self.scale

    @property
    def _hxi(self) -> float:
        return FD_STEP_FACTOR

    def _zeros(self, x, t, xi, *tail: int) -> np.ndarray:
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(t), np.shape(xi)[:-1])
        return np.zeros(shape + tuple(tail))

    def grad_xi(self, x, t, xi) -> np.ndarray:
        args = (x, t, xi)
        return np.stack([_first_difference(self.value, args, "xi", j, self._hxi) for j in range(self.dim)], axis=-1)

    def hess_xi(self, x, t, xi) -> np.ndarray:
        args = (x, t, xi)
        h = self._hxi
        rows = []
        for i in range(self.dim):
            row = []
            for j in range(self.dim):
                if i == j:
                    row.append(_second_difference(self.value, args, "xi", i, h))
                else:
                    inner = lambda *a, _j=j: _first_difference(self.value, a, "xi", _j, h)
                    row.append(_first_difference(inner, args, "xi", i, h))
            rows.append(np.stack(row, axis=-1))
        return np.stack(rows, axis=-2)

    def third_xi(self, x, t, xi) -> np.ndarray:
        args = (x, t, xi)
        h = self._hxi
        hessian = lambda *a: SymbolModel.hess_xi(self, *a)
        return np.stack([_first_difference(hessian, args, "xi", k, h) for k in range(self.dim)], axis=-1)

    def grad_x(self, x, t, xi) -> np.ndarray:
        if self.x_independent:
            return self._zeros(x, t, xi, self.dim)
        args = (x, t, xi)
        return np.stack([_first_difference(self.value, args, "x", k, self._hx) for k in range(self.dim)], axis=-1)

    def hess_x(self, x, t, xi) -> np.ndarray:
        if self.x_independent:
            return self._zeros(x, t, xi, self.dim, self.dim)
        args = (x, t, xi)
        h = self._hx
        rows = []
        for k in range(self.dim):
            row = []
            for m in range(self.dim):
                if k == m:
                    row.append(_second_difference(self.value, args, "x", k, h))
                else:
                    inner = lambda *a, _m=m: _first_difference(self.value, a, "x", _m, h)
                    row.append(_first_difference(inner, args, "x", k, h))
            rows.append(np.stack(row, axis=-1))
        return np.stack(rows, axis=-2)

    def mixed_x_xi(self, x, t, xi) -> np.ndarray:
        """[..., k, j] = d_{x_k} d_{xi_j} p."""
        if self.x_independent:
            return self._zeros(x, t, xi, self.dim, self.dim)
        args = (x, t, xi)
        rows = []
        for k in range(self.dim):
            row = []
            for j in range(self.dim):
                inner = lambda *a, _j=j: _first_difference(self.value, a, "xi", _j, self._hxi)
                row.append(_first_difference(inner, args, "x", k, self._hx))
            rows.append(np.stack(row, axis=-1))
        return np.stack(rows, axis=-2)

    def dt(self, x, t, xi) -> np.ndarray:
        if self.time_independent:
            return self._zeros(x, t, xi)
        return _first_difference(self.value, (x, t, xi), "t", 0, self._hx)

    def dt_xi(self, x, t, xi) -> np.ndarray:
        if self.time_independent:
            return self._zeros(x, t, xi, self.dim)
        inner = lambda *a: SymbolModel.grad_xi(self, *a)
        return _first_difference(inner, (x, t, xi), "t", 0, self._hx)

    def dt_x(self, x, t, xi) -> np.ndarray:
        if self.time_independent or self.x_independent:
            return self._zeros(x, t, xi, self.dim)
        inner = lambda *a: SymbolModel.grad_x(self, *a)
        return _first_difference(inner, (x, t, xi), "t", 0, self._hx)

    def dtt(self, x, t, xi) -> np.ndarray:
        if self.time_independent:
            return self._zeros(x, t, xi)
        return _second_difference(self.value, (x, t, xi), "t", 0, self._hx)


class FunctionSymbol(SymbolModel):
    """A symbol given by a vectorized callable f(x, t, xi); all derivatives by finite differences."""

    def __init__(self, func: Callable[[np.ndarray, float | np.ndarray, np.ndarray], np.ndarray], dim: int, **kwargs):
        super().__init__(dim, kwargs.pop("homogeneity", None), kwargs.pop("cutoff", FrequencyCutoff.NONE), **kwargs)
        self._func = func

    def value(self, x, t, xi) -> np.ndarray:
        x, xi = np.asarray(x, dtype=float), np.asarray(xi, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(t), xi.shape[:-1])
        return np.broadcast_to(np.asarray(self._func(x, t, xi), dtype=float), shape)


class SymbolKind(str, enum.Enum):
    SCHRODINGER = "schrodinger"
    HALFWAVE = "halfwave"


class MetricSymbol(SymbolModel):
    """p = g^{ij} xi_i xi_j (Schrodinger type) or p = (g^{ij} xi_i xi_j)^{1/2} (half-wave type)."""

    def __init__(
            self,
            metric: MetricField,
            kind: SymbolKind,
            scale: float | None = None,
            regularity: RegularityMetadata | None = None,
            cutoff: FrequencyCutoff | None = None,
    ):
        homogeneity, default_cutoff = (2, FrequencyCutoff.BALL) if kind == SymbolKind.SCHRODINGER else (1, FrequencyCutoff.ANNULUS)
        cutoff = default_cutoff if cutoff is None else FrequencyCutoff(cutoff)
        super().__init__(
            metric.dim,
            homogeneity,
            cutoff,
            scale=scale if scale is not None else max(metric.extent / math.pi, 1.0),
            name=f"{kind.value}[{metric.name}]",
            regularity=regularity,
            time_independent=True,
            x_independent=metric.constant,
        )
        self.metric: MetricField = metric
        self.kind: SymbolKind = kind

    def _pieces(self, x, xi):
        x, xi = np.asarray(x, dtype=float), np.asarray(xi, dtype=float)
        g = self.metric.matrix(x)
        g_xi = np.einsum("...ij,...j->...i", g, xi)
        q = np.einsum("...i,...i->...", xi, g_xi)
        return x, xi, g, g_xi, q

    def _gradient_quadratics(self, x, xi):
        dg = self.metric.gradient(x)
        dg_xi = np.einsum("...ijk,...j->...ik", dg, xi)
        q_x = np.einsum("...i,...ik->...k", xi, dg_xi)
        return dg_xi, q_x

    def value(self, x, t, xi) -> np.ndarray:
        _, _, _, _, q = self._pieces(x, xi)
        return q if self.kind == SymbolKind.SCHRODINGER else np.sqrt(q)

    def grad_xi(self, x, t, xi) -> np.ndarray:
        _, _, _, g_xi, q = self._pieces(x, xi)
        if self.kind == SymbolKind.SCHRODINGER:
            return 2 * g_xi
        return g_xi / np.sqrt(q)[..., None]

    def hess_xi(self, x, t, xi) -> np.ndarray:
        _, _, g, g_xi, q = self._pieces(x, xi)
        if self.kind == SymbolKind.SCHRODINGER:
            return 2 * np.broadcast_to(g, np.broadcast_shapes(g.shape, g_xi.shape[:-1] + (self.dim, self.dim)))
        p = np.sqrt(q)[..., None, None]
        return g / p - np.einsum("...i,...j->...ij", g_xi, g_xi) / p ** 3

    def third_xi(self, x, t, xi) -> np.ndarray:
        _, _, g, g_xi, q = self._pieces(x, xi)
        shape = np.broadcast_shapes(g.shape[:-2], g_xi.shape[:-1]) + (self.dim,) * 3
        if self.kind == SymbolKind.SCHRODINGER:
            return np.zeros(shape)
        p = np.sqrt(q)[..., None, None, None]
        terms = np.einsum("...ij,...k->...ijk", g, g_xi) + np.einsum("...ik,...j->...ijk", g, g_xi) \
            + np.einsum("...jk,...i->...ijk", g, g_xi)
        return -terms / p ** 3 + 3 * np.einsum("...i,...j,...k->...ijk", g_xi, g_xi, g_xi) / p ** 5

    def grad_x(self, x, t, xi) -> np.ndarray:
        x, xi, _, _, q = self._pieces(x, xi)
        _, q_x = self._gradient_quadratics(x, xi)
        if self.kind == SymbolKind.SCHRODINGER:
            return q_x
        return q_x / (2 * np.sqrt(q))[..., None]

    def hess_x(self, x, t, xi) -> np.ndarray:
        x, xi, _, _, q = self._pieces(x, xi)
        q_xx = np.einsum("...i,...ijkl,...j->...kl", xi, self.metric.hessian(x), xi)
        if self.kind == SymbolKind.SCHRODINGER:
            return q_xx
        _, q_x = self._gradient_quadratics(x, xi)
        p = np.sqrt(q)[..., None, None]
        return q_xx / (2 * p) - np.einsum("...k,...l->...kl", q_x, q_x) / (4 * p ** 3)

    def mixed_x_xi(self, x, t, xi) -> np.ndarray:
        x, xi, _, g_xi, q = self._pieces(x, xi)
        dg_xi, q_x = self._gradient_quadratics(x, xi)
        # [..., k, j] = d_{x_k} d_{xi_j}
        base = 2 * np.swapaxes(dg_xi, -1, -2)
        if self.kind == SymbolKind.SCHRODINGER:
            return base
        p = np.sqrt(q)[..., None, None]
        return base / (2 * p) - np.einsum("...k,...j->...kj", q_x, g_xi) / (2 * p ** 3)


def make_schrodinger(metric: MetricField, scale: float | None = None, cutoff: FrequencyCutoff = FrequencyCutoff.BALL) -> MetricSymbol:
    """Schrodinger-type symbol g^{ij} xi_i xi_j. Whole-line problems pass cutoff=NONE."""
    metric.validate()
    if metric.bounds.lower <= 0:
        raise ConstructionError(f"Metric '{metric.name}' is degenerate (lower bound {metric.bounds.lower})")
    return MetricSymbol(metric, SymbolKind.SCHRODINGER, scale=scale, cutoff=cutoff)


def make_halfwave(metric: MetricField, scale: float | None = None) -> MetricSymbol:
    if not metric.bounds.definite or metric.bounds.lower <= 0:
        raise ConstructionError(f"Metric '{metric.name}' is not elliptic, the half-wave symbol is undefined")
    metric.validate()
    return MetricSymbol(metric, SymbolKind.HALFWAVE, scale=scale)


# Diagnostics


DERIVATIVE_NAMES: tuple[str, ...] = (
    "grad_xi", "hess_xi", "third_xi", "grad_x", "hess_x", "mixed_x_xi", "dt", "dt_xi", "dt_x", "dtt",
)


# name -> (lower-order evaluator, variable, axis the new index is stacked on)
_DERIVATIVE_CHAIN: dict[str, tuple[str, str, int]] = {
    "grad_xi": ("value", "xi", -1),
    "hess_xi": ("grad_xi", "xi", -2),
    "third_xi": ("hess_xi", "xi", -1),
    "grad_x": ("value", "x", -1),
    "hess_x": ("grad_x", "x", -2),
    "mixed_x_xi": ("grad_xi", "x", -2),
    "dt": ("value", "t", 0),
    "dt_xi": ("grad_xi", "t", 0),
    "dt_x": ("grad_x", "t", 0),
    "dtt": ("dt", "t", 0),
}


def _chained_stencil(symbol: SymbolModel, name: str, x, t, xi) -> np.ndarray:
    lower, var, axis = _DERIVATIVE_CHAIN[name]
    f = getattr(symbol, lower)
    args = (np.asarray(x, dtype=float), t, np.asarray(xi, dtype=float))
    if var == "t":
        return _first_difference(f, args, "t", 0, symbol._hx)
    h = symbol._hxi if var == "xi" else symbol._hx
    return np.stack([_first_difference(f, args, var, k, h) for k in range(symbol.dim)], axis=axis)


def derivative_check(symbol: SymbolModel, x: np.ndarray, t: float | np.ndarray, xi: np.ndarray) -> dict[str, float]:
    """
    Relative deviation of every derivative evaluator from a 4th-order central difference of the evaluator
    one order below it. Errors are measured against the largest of the closed form, the difference and the
    symbol value, so derivatives that vanish identically are compared on the scale of the symbol.
    """
    report = {}
    floor = float(np.max(np.abs(symbol.value(x, t, xi))))
    for name in DERIVATIVE_NAMES:
        closed = np.asarray(getattr(symbol, name)(x, t, xi))
        stencil = np.asarray(_chained_stencil(symbol, name, x, t, xi))
        if not closed.size:
            report[name] = 0.0
            continue
        scale = max(float(np.max(np.abs(closed))), float(np.max(np.abs(stencil))), floor)
        error = float(np.max(np.abs(closed - stencil)))
        report[name] = error / scale if scale > 0 else error
    failing = {k: v for k, v in report.items() if v > FD_RELATIVE_TOLERANCE}
    if failing:
        logger.warning("Derivative cross-check above tolerance for %s: %s", symbol.name, failing)
    return report


def homogeneity_defect(symbol: SymbolModel, x: np.ndarray, t: float, xi: np.ndarray, lambdas: Sequence[float] = (0.5, 0.75, 1.5, 2.0)) -> float:
    if symbol.homogeneity is None:
        raise ParameterError(f"Symbol '{symbol.name}' declares no homogeneity")
    base = symbol.value(x, t, xi)
    return max(
        float(np.max(np.abs(symbol.value(x, t, lam * np.asarray(xi)) - lam ** symbol.homogeneity * base)))
        for lam in lambdas
    )


@dataclasses.dataclass(frozen=True)
class SampleBox(DataClassJsonMixin):
    x_center: tuple[float, ...]
    x_radius: float
    t_range: tuple[float, float] = (0.0, 0.0)
    xi_center: tuple[float, ...] | None = None
    xi_radius: float = 1.0
    annulus: bool = False

    def sample(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dim = len(self.x_center)
        x = np.asarray(self.x_center) + rng.uniform(-self.x_radius, self.x_radius, size=(count, dim))
        t = rng.uniform(self.t_range[0], self.t_range[1], size=count) if self.t_range[1] > self.t_range[0] \
            else np.full(count, self.t_range[0])
        if self.annulus:
            direction = rng.normal(size=(count, dim))
            direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
            xi = direction * rng.uniform(ANNULUS_INNER, ANNULUS_OUTER, size=(count, 1))
        else:
            center = np.zeros(dim) if self.xi_center is None else np.asarray(self.xi_center)
            xi = center + rng.uniform(-self.xi_radius, self.xi_radius, size=(count, dim))
        return x, t, xi


@dataclasses.dataclass(frozen=True)
class RegularityReport(DataClassJsonMixin):
    epsilon_hat: float
    C2_hat: float
    d1_hat: float
    d2_hat: float
    samples: int


def regularity_constants(symbol: SymbolModel, box: SampleBox, R: float, samples: int = 256, seed: int = 0) -> RegularityReport:
    if R < 1:
        raise ParameterError(f"Scale R must be >= 1, got {R}")
    x, t, xi = box.sample(samples, np.random.default_rng(seed))

    def _peak(values: np.ndarray) -> float:
        values = np.asarray(values)
        return float(np.max(np.abs(values))) if values.size else 0.0

    first_order = max(_peak(symbol.grad_x(x, t, xi)), _peak(symbol.dt(x, t, xi)),
                      _peak(symbol.mixed_x_xi(x, t, xi)), _peak(symbol.dt_xi(x, t, xi)))
    second_order = max(_peak(symbol.hess_x(x, t, xi)), _peak(symbol.dt_x(x, t, xi)), _peak(symbol.dtt(x, t, xi)))
    c2 = max(_peak(symbol.value(x, t, xi)), _peak(symbol.grad_xi(x, t, xi)),
             _peak(symbol.hess_xi(x, t, xi)), _peak(symbol.third_xi(x, t, xi)))
    determinants = np.abs(np.linalg.det(symbol.hess_xi(x, t, xi)))
    return RegularityReport(
        epsilon_hat=max(R * first_order, R ** 2 * second_order),
        C2_hat=c2,
        d1_hat=float(np.min(determinants)),
        d2_hat=float(np.max(determinants)),
        samples=samples,
    )


# Loss budget


def _fraction(value: Fraction | float | int | str) -> Fraction:
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10 ** 6)
    return Fraction(value)


def _fraction_field(**kwargs) -> dataclasses.Field:
    return dataclasses.field(
        metadata=dataclasses_json.config(
            encoder=lambda v: None if v is None else str(v),
            decoder=lambda v: None if v is None else Fraction(v),
        ),
        **kwargs
    )


@dataclasses.dataclass(frozen=True)
class LossBudget(DataClassJsonMixin):
    s: Fraction = _fraction_field()
    d: int = 1
    q: Fraction | None = _fraction_field(default=None)
    sigma: Fraction = _fraction_field(default=Fraction(0))
    kappa0: Fraction | None = _fraction_field(default=None)
    kappa1: Fraction = _fraction_field(default=Fraction(0))
    kappa: Fraction = _fraction_field(default=Fraction(0))
    bilinear_wave_loss: Fraction = _fraction_field(default=Fraction(0))
    interval_count_exponent: Fraction = _fraction_field(default=Fraction(0))
    packet_scale_exponent: Fraction = _fraction_field(default=Fraction(0))
    interval_length_exponent: Fraction = _fraction_field(default=Fraction(0))
    wave_endpoint_q: Fraction | None = _fraction_field(default=None)
    schrodinger_endpoint_q: Fraction | None = _fraction_field(default=None)
    smoothing_kappa0: Fraction = _fraction_field(default=Fraction(0))
    smoothing_kappa1: Fraction = _fraction_field(default=Fraction(0))


def loss_budget(s: Fraction | float | int | str, d: int, q: Fraction | float | int | str | None = None) -> LossBudget:
    s = _fraction(s)
    if not 0 <= s <= 1:
        raise ParameterError(f"Holder exponent s must lie in [0, 1], got {s}")
    if d < 1:
        raise ParameterError(f"Dimension must be positive, got {d}")
    q = None if q is None else _fraction(q)
    if q is not None and q <= 2:
        raise ParameterError(f"Lebesgue exponent q must exceed 2, got {q}")
    sigma = Fraction(2) / (3 + s)
    return LossBudget(
        s=s,
        d=d,
        q=q,
        sigma=sigma,
        kappa0=None if q is None else Fraction(d - 1, 2) - d / q,
        kappa1=(1 - s) / (2 * (3 + s)),
        kappa=sigma - Fraction(1, 2),
        bilinear_wave_loss=Fraction(4) / (3 + s) * Fraction(d - 1, d + 3),
        interval_count_exponent=2 * sigma - 1,
        packet_scale_exponent=2 * (1 - sigma),
        interval_length_exponent=1 - 2 * sigma,
        wave_endpoint_q=Fraction(2 * (d - 1), d - 3) if d >= 4 else None,
        schrodinger_endpoint_q=Fraction(2 * d, d - 2) if d >= 3 else None,
        smoothing_kappa0=Fraction(-2, d + 3),
        smoothing_kappa1=Fraction(d + 1) * (1 - s) / ((3 + s) * (d + 3)),
    )
