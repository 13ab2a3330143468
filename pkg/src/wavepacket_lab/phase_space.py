import dataclasses
import enum
import itertools
import logging
import math
import warnings
from typing import Sequence

import numpy as np
from dataclasses_json import DataClassJsonMixin
from scipy import special

from .consts import SUPPORTED_DIMENSIONS, DEFAULT_DELTA, DEFAULT_DELTA0, DEFAULT_THICKENING_C, PARTITION_PLATEAU, \
    COHERENT_TAIL_TOLERANCE, LATTICE_TOLERANCE, ANNULUS_INNER, ANNULUS_OUTER
from .errors import ParameterError, ScaleClampWarning, TruncationWarning
from .grids import SpatialGrid, SpatialField
from .utils import plateau_bump, periodic_delta

logger = logging.getLogger(__name__)


def _as_vector(value: float | Sequence[float] | np.ndarray) -> tuple[float, ...]:
    return tuple(float(v) for v in np.atleast_1d(np.asarray(value, dtype=float)))


@dataclasses.dataclass(frozen=True)
class PhasePoint(DataClassJsonMixin):
    x: tuple[float, ...]
    xi: tuple[float, ...]

    def __post_init__(self):
        x, xi = _as_vector(self.x), _as_vector(self.xi)
        if len(x) != len(xi) or len(x) not in SUPPORTED_DIMENSIONS:
            raise ParameterError(f"Phase point needs matching position/frequency of dimension 1 or 2, got {len(x)} and {len(xi)}")
        if not all(math.isfinite(v) for v in x + xi):
            raise ParameterError(f"Phase point has non-finite components: {x}, {xi}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xi", xi)

    @property
    def dim(self) -> int:
        return len(self.x)

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.x)

    @property
    def frequency(self) -> np.ndarray:
        return np.asarray(self.xi)

    def shifted(self, dx: Sequence[float] | float = 0.0, dxi: Sequence[float] | float = 0.0) -> 'PhasePoint':
        return PhasePoint(x=self.position + np.asarray(dx, dtype=float), xi=self.frequency + np.asarray(dxi, dtype=float))


@dataclasses.dataclass(frozen=True)
class ScaleParams(DataClassJsonMixin):
    R: float
    nu: float = 1.0
    delta0: float = DEFAULT_DELTA0
    delta: float = DEFAULT_DELTA
    thickening_c: float = DEFAULT_THICKENING_C

    def __post_init__(self):
        if self.R < 1:
            raise ParameterError(f"Spatial scale R must be >= 1, got {self.R}")
        if not 0 < self.delta < 0.5:
            raise ParameterError(f"Tail exponent delta must lie in (0, 1/2), got {self.delta}")
        if not 0 <= self.delta0 < 0.5:
            raise ParameterError(f"Margin exponent delta0 must lie in [0, 1/2), got {self.delta0}")
        if self.delta0 > 0 and self.delta > self.delta0:
            raise ParameterError(f"Need delta <= delta0, got delta = {self.delta}, delta0 = {self.delta0}")
        if not 0 < self.nu <= 1:
            raise ParameterError(f"Transversality nu must lie in (0, 1], got {self.nu}")
        if self.thickening_c < 1:
            raise ParameterError(f"Thickening constant must be >= 1, got {self.thickening_c}")
        floor = self.nu_floor
        if self.nu < floor * (1 - 1e-12):
            message = f"nu = {self.nu:.6g} below R^(-1/2+delta0) = {floor:.6g}, clamped"
            logger.warning(message)
            warnings.warn(message, ScaleClampWarning)
            object.__setattr__(self, "nu", min(1.0, floor))

    @property
    def nu_floor(self) -> float:
        return self.R ** (-0.5 + self.delta0)

    @property
    def rho(self) -> float:
        return 1 / self.R

    @property
    def min_scale(self) -> float:
        return self.nu ** (-2 - self.delta0)

    def spatial_tolerance(self, r: float | None = None) -> float:
        return (self.R if r is None else r) ** (0.5 + self.delta)

    def frequency_tolerance(self, r: float | None = None) -> float:
        return (self.R if r is None else r) ** (-0.5 + self.delta)

    def check_scale(self, r: float):
        lo, hi = self.min_scale, self.R
        if not lo * (1 - 1e-12) <= r <= hi * (1 + 1e-12):
            raise ParameterError(f"Scale r = {r:.6g} outside [nu^(-2-delta0), R] = [{lo:.6g}, {hi:.6g}]")


class FrequencyMode(str, enum.Enum):
    BALL = "ball"
    SECTOR = "sector"


@dataclasses.dataclass(frozen=True)
class PhaseSpaceRegion(DataClassJsonMixin):
    """Spatial ball times a frequency ball or sector, with thickening margins."""
    x_center: tuple[float, ...]
    x_radius: float
    xi_center: tuple[float, ...]
    xi_radius: float
    mode: FrequencyMode = FrequencyMode.BALL
    x_margin: float = 0.0
    xi_margin: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x_center", _as_vector(self.x_center))
        object.__setattr__(self, "xi_center", _as_vector(self.xi_center))
        object.__setattr__(self, "mode", FrequencyMode(self.mode))
        if len(self.x_center) != len(self.xi_center) or len(self.x_center) not in SUPPORTED_DIMENSIONS:
            raise ParameterError("Region centers must share dimension 1 or 2")
        if self.x_radius < 0 or self.xi_radius < 0:
            raise ParameterError("Region radii must be nonnegative")
        if self.x_margin < 0 or self.xi_margin < 0:
            raise ParameterError("Region margins must be nonnegative")
        if self.xi_radius > 1 + 1e-12:
            raise ParameterError(f"Frequency radius must be <= 1, got {self.xi_radius}")
        if self.mode == FrequencyMode.SECTOR and abs(np.linalg.norm(self.xi_center) - 1) > 1e-12:
            raise ParameterError("Sector center must be a unit vector")

    @property
    def dim(self) -> int:
        return len(self.x_center)

    @property
    def spatial_reach(self) -> float:
        return self.x_radius + self.x_margin

    @property
    def frequency_reach(self) -> float:
        return self.xi_radius + self.xi_margin

    def spatial_excess(self, x: np.ndarray, period: float | None = None) -> np.ndarray:
        delta = periodic_delta(x, np.asarray(self.x_center), period)
        return np.maximum(np.linalg.norm(delta, axis=-1) - self.spatial_reach, 0.0)

    def frequency_excess(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        center = np.asarray(self.xi_center)
        if self.mode == FrequencyMode.BALL:
            return np.maximum(np.linalg.norm(xi - center, axis=-1) - self.frequency_reach, 0.0)
        magnitude = np.linalg.norm(xi, axis=-1)
        radial = np.maximum(ANNULUS_INNER - self.xi_margin - magnitude, 0.0) + \
            np.maximum(magnitude - ANNULUS_OUTER - self.xi_margin, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            direction = xi / magnitude[..., None]
        gap = np.linalg.norm(np.nan_to_num(direction, nan=0.0) - center, axis=-1)
        angular = np.where(magnitude > 0, np.maximum(gap - self.frequency_reach, 0.0) * magnitude, 0.0)
        return np.hypot(radial, angular)

    def d_r_excess(self, x: np.ndarray, xi: np.ndarray, r: float, period: float | None = None) -> np.ndarray:
        return self.spatial_excess(x, period) / math.sqrt(r) + math.sqrt(r) * self.frequency_excess(xi)

    def contains(self, point: PhasePoint, period: float | None = None) -> bool:
        return bool(
            self.spatial_excess(point.position, period) <= LATTICE_TOLERANCE * max(1.0, self.spatial_reach)
            and self.frequency_excess(point.frequency) <= LATTICE_TOLERANCE
        )

    def spatial_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        center = np.asarray(self.x_center)
        return center - self.spatial_reach, center + self.spatial_reach

    def frequency_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.mode == FrequencyMode.BALL:
            center = np.asarray(self.xi_center)
            return center - self.frequency_reach, center + self.frequency_reach
        reach = ANNULUS_OUTER + self.xi_margin
        return np.full(self.dim, -reach), np.full(self.dim, reach)

    def translated(self, dx: Sequence[float] | float) -> 'PhaseSpaceRegion':
        return dataclasses.replace(self, x_center=tuple(np.asarray(self.x_center) + np.asarray(dx, dtype=float)))

    def with_margins(self, x_margin: float, xi_margin: float) -> 'PhaseSpaceRegion':
        return dataclasses.replace(self, x_margin=x_margin, xi_margin=xi_margin)

    def covers(self, other: 'PhaseSpaceRegion') -> bool:
        """Inclusion for regions sharing centers, radii and mode."""
        same_shape = (self.x_center, self.x_radius, self.xi_center, self.xi_radius, self.mode) == \
            (other.x_center, other.x_radius, other.xi_center, other.xi_radius, other.mode)
        return same_shape and self.x_margin >= other.x_margin and self.xi_margin >= other.xi_margin


@dataclasses.dataclass(frozen=True)
class Lattice(DataClassJsonMixin):
    """Points of r^(1/2) Z^d x r^(-1/2) Z^d in lexicographic grid-index order."""
    r: float
    points: tuple[PhasePoint, ...]
    indices: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.points)

    @property
    def x_spacing(self) -> float:
        return math.sqrt(self.r)

    @property
    def xi_spacing(self) -> float:
        return 1 / math.sqrt(self.r)

    def positions(self) -> np.ndarray:
        return np.array([p.x for p in self.points], dtype=float)

    def frequencies(self) -> np.ndarray:
        return np.array([p.xi for p in self.points], dtype=float)


def _check_scale(r: float):
    if not r > 0:
        raise ParameterError(f"Scale must be positive, got {r}")


def d_r_metric(p1: PhasePoint, p2: PhasePoint, r: float) -> float:
    _check_scale(r)
    return float(
        np.linalg.norm(p1.position - p2.position) / math.sqrt(r)
        + math.sqrt(r) * np.linalg.norm(p1.frequency - p2.frequency)
    )


def _index_range(lo: float, hi: float, spacing: float) -> range:
    start = math.ceil(lo / spacing - LATTICE_TOLERANCE)
    stop = math.floor(hi / spacing + LATTICE_TOLERANCE)
    return range(start, stop + 1)


def lattice_points(r: float, region: PhaseSpaceRegion, period: float | None = None) -> Lattice:
    _check_scale(r)
    sx, sxi = math.sqrt(r), 1 / math.sqrt(r)
    x_lo, x_hi = region.spatial_bounds()
    xi_lo, xi_hi = region.frequency_bounds()
    axes = [_index_range(lo, hi, sx) for lo, hi in zip(x_lo, x_hi)] + \
           [_index_range(lo, hi, sxi) for lo, hi in zip(xi_lo, xi_hi)]
    points, indices = [], []
    for index in itertools.product(*axes):
        point = PhasePoint(x=np.asarray(index[:region.dim]) * sx, xi=np.asarray(index[region.dim:]) * sxi)
        if region.contains(point, period):
            points.append(point)
            indices.append(tuple(index))
    logger.debug("Lattice at r = %.4g: %d points", r, len(points))
    return Lattice(r=float(r), points=tuple(points), indices=tuple(indices))


def thicken(region: PhaseSpaceRegion, r: float, params: ScaleParams, outer: bool = False) -> PhaseSpaceRegion:
    params.check_scale(r)
    factor = params.thickening_c if outer else 1.0
    x_margin = factor * params.R * r ** (-0.5 + params.delta0)
    xi_margin = factor * r ** (-0.5 + params.delta0)
    return region.with_margins(region.x_margin + x_margin, region.xi_margin + xi_margin)


def coherent_state(x0: Sequence[float] | float, xi0: Sequence[float] | float, R: float, grid: SpatialGrid) -> SpatialField:
    """
    The state e^{i xi0 (y - x0)} e^{-(y - x0)^2 / 2R} that the phase-space transform at scale R
    concentrates at (x0, xi0). It is the complex conjugate of the transform kernel, see coherent_state_kernel.
    """
    _check_scale(R)
    x0, xi0 = np.asarray(_as_vector(x0)), np.asarray(_as_vector(xi0))
    if len(x0) != grid.dim or len(xi0) != grid.dim:
        raise ParameterError(f"Coherent state of dimension {len(x0)} on a {grid.dim}-dimensional grid")
    tail = grid.dim * float(special.erfc(grid.boundary_distance(x0) / math.sqrt(R)))
    if tail > COHERENT_TAIL_TOLERANCE:
        message = f"Coherent state at {tuple(x0)} with R = {R:.4g} leaks {tail:.3g} of its mass across the box seam"
        logger.warning(message)
        warnings.warn(TruncationWarning(message, tail))
    delta = grid.displacement(x0)
    phase = np.tensordot(delta, xi0, axes=([-1], [0]))
    envelope = np.exp(-np.sum(delta ** 2, axis=-1) / (2 * R))
    return SpatialField(grid, np.exp(1j * phase) * envelope)


def coherent_state_kernel(x: Sequence[float] | float, xi: Sequence[float] | float, R: float, grid: SpatialGrid) -> SpatialField:
    """y -> e^{i xi (x - y)} e^{-(x - y)^2 / 2R}, the integral kernel of the transform at (x, xi)."""
    state = coherent_state(x, xi, R, grid)
    return SpatialField(grid, np.conj(state.values))


def _axis_bump(u: np.ndarray, plateau: float) -> np.ndarray:
    return plateau_bump(np.asarray(u, dtype=float) / plateau)


def _axis_total(u: np.ndarray, plateau: float) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    nearest = np.rint(u)
    reach = math.ceil(2 * plateau) + 1
    return sum(_axis_bump(u - (nearest + n), plateau) for n in range(-reach, reach + 1))


@dataclasses.dataclass(frozen=True)
class PartitionOfUnity:
    """
    Smooth weights psi_T indexed by the lattice. Each weight is a tensor product of 1-D bumps, equal to 1
    within `plateau` lattice spacings of its center and 0 beyond 2 * plateau spacings, divided by the sum
    over the full (unclipped) lattice. The weights of the full lattice therefore sum to exactly 1.
    """
    lattice: Lattice
    plateau: float = PARTITION_PLATEAU

    @property
    def r(self) -> float:
        return self.lattice.r

    @property
    def spatial_support(self) -> float:
        return 2 * self.plateau * self.lattice.x_spacing * math.sqrt(self._dim)

    @property
    def frequency_support(self) -> float:
        return 2 * self.plateau * self.lattice.xi_spacing * math.sqrt(self._dim)

    @property
    def _dim(self) -> int:
        return self.lattice.points[0].dim if len(self.lattice) > 0 else 1

    def _factor(self, values: np.ndarray, center: float, spacing: float) -> np.ndarray:
        u = np.asarray(values, dtype=float) / spacing
        return _axis_bump(u - center / spacing, self.plateau) / _axis_total(u, self.plateau)

    def axis_factors(self, point: PhasePoint, x: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Spatial and frequency factors of psi_T on separate meshes, each of shape (..., d) -> (...)."""
        sx, sxi = self.lattice.x_spacing, self.lattice.xi_spacing
        fx = np.prod([self._factor(x[..., a], point.x[a], sx) for a in range(point.dim)], axis=0)
        fxi = np.prod([self._factor(xi[..., a], point.xi[a], sxi) for a in range(point.dim)], axis=0)
        return fx, fxi

    def weight(self, point: PhasePoint, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        fx, fxi = self.axis_factors(point, np.asarray(x, dtype=float), np.asarray(xi, dtype=float))
        return fx * fxi

    def weights(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return np.stack([self.weight(p, x, xi) for p in self.lattice.points])

    def total(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return np.sum(self.weights(x, xi), axis=0)

    def covering(self, point: PhasePoint) -> list[PhasePoint]:
        """All points of the full lattice whose weight is supported at `point`."""
        sx, sxi = self.lattice.x_spacing, self.lattice.xi_spacing
        reach = 2 * self.plateau
        axes = [_index_range(v / sx - reach, v / sx + reach, 1.0) for v in point.x] + \
               [_index_range(v / sxi - reach, v / sxi + reach, 1.0) for v in point.xi]
        return [
            PhasePoint(x=np.asarray(index[:point.dim]) * sx, xi=np.asarray(index[point.dim:]) * sxi)
            for index in itertools.product(*axes)
        ]


def partition_weights(lattice: Lattice, r: float) -> PartitionOfUnity:
    if len(lattice) == 0:
        raise ParameterError("Partition of unity needs a nonempty lattice")
    if not math.isclose(lattice.r, r, rel_tol=1e-12):
        raise ParameterError(f"Lattice was built at r = {lattice.r}, not {r}")
    return PartitionOfUnity(lattice)
