import dataclasses
import math
from functools import cached_property

import numpy as np
from dataclasses_json import DataClassJsonMixin

from .consts import MIN_GRID_POINTS, SUPPORTED_DIMENSIONS, BAND_LIMIT_FRACTION, BAND_LIMIT_TOLERANCE
from .errors import ParameterError, ResolutionError
from .utils import array_field, periodic_delta


@dataclasses.dataclass(frozen=True)
class SpatialGrid(DataClassJsonMixin):
    """Uniform periodic grid on the box [-L, L)^d."""
    dim: int
    half_width: float
    points: int

    def __post_init__(self):
        if self.dim not in SUPPORTED_DIMENSIONS:
            raise ParameterError(f"Unsupported dimension: {self.dim}")
        if self.half_width <= 0:
            raise ParameterError(f"Box half-width must be positive, got {self.half_width}")
        if self.points < MIN_GRID_POINTS or self.points & (self.points - 1) != 0:
            raise ParameterError(f"Points per axis must be a power of 2 >= {MIN_GRID_POINTS}, got {self.points}")

    @staticmethod
    def covering(dim: int, half_width: float, max_spacing: float) -> 'SpatialGrid':
        needed = max(MIN_GRID_POINTS, math.ceil(2 * half_width / max_spacing))
        return SpatialGrid(dim=dim, half_width=float(half_width), points=1 << (needed - 1).bit_length())

    @property
    def spacing(self) -> float:
        return 2 * self.half_width / self.points

    @property
    def period(self) -> float:
        return 2 * self.half_width

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points,) * self.dim

    @property
    def nyquist(self) -> float:
        return math.pi / self.spacing

    @cached_property
    def axis(self) -> np.ndarray:
        axis = -self.half_width + self.spacing * np.arange(self.points)
        axis.setflags(write=False)
        return axis

    @cached_property
    def frequency_axis(self) -> np.ndarray:
        axis = 2 * np.pi * np.fft.fftfreq(self.points, self.spacing)
        axis.setflags(write=False)
        return axis

    @cached_property
    def coordinates(self) -> np.ndarray:
        coords = np.stack(np.meshgrid(*([self.axis] * self.dim), indexing="ij"), axis=-1)
        coords.setflags(write=False)
        return coords

    @cached_property
    def frequencies(self) -> np.ndarray:
        freqs = np.stack(np.meshgrid(*([self.frequency_axis] * self.dim), indexing="ij"), axis=-1)
        freqs.setflags(write=False)
        return freqs

    def displacement(self, center: np.ndarray) -> np.ndarray:
        """Periodic displacement y - center at every grid point, shape (*shape, dim)."""
        return periodic_delta(self.coordinates, np.asarray(center, dtype=float), self.period)

    def boundary_distance(self, center: np.ndarray) -> float:
        """Distance from center to the wrap seam along the worst axis."""
        offsets = np.abs(periodic_delta(np.asarray(center, dtype=float), 0.0, self.period))
        return float(self.half_width - np.max(offsets))

    def zeros(self) -> 'SpatialField':
        return SpatialField(self, np.zeros(self.shape, dtype=complex))


@dataclasses.dataclass(frozen=True, eq=False)
class SpatialField(DataClassJsonMixin):
    grid: SpatialGrid
    values: np.ndarray = array_field()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.shape != self.grid.shape:
            raise ResolutionError(f"Field shape {values.shape} does not match grid shape {self.grid.shape}")
        object.__setattr__(self, "values", values)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.grid.cell_volume))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def l1_norm(self) -> float:
        return float(np.sum(np.abs(self.values)) * self.grid.cell_volume)

    def inner(self, other: 'SpatialField') -> complex:
        self._check_compatible(other)
        return complex(np.sum(self.values * np.conj(other.values)) * self.grid.cell_volume)

    def normalized(self) -> 'SpatialField':
        norm = self.norm()
        return self if norm == 0 else SpatialField(self.grid, self.values / norm)

    def spectrum(self) -> np.ndarray:
        return np.fft.fftn(self.values)

    def spectral_fraction_above(self, cutoff: float) -> float:
        power = np.abs(self.spectrum()) ** 2
        total = float(np.sum(power))
        if total == 0:
            return 0.0
        magnitude = np.linalg.norm(self.grid.frequencies, axis=-1)
        return float(np.sum(power[magnitude > cutoff]) / total)

    def check_band_limit(self, fraction: float = BAND_LIMIT_FRACTION):
        tail = self.spectral_fraction_above(fraction * self.grid.nyquist)
        if tail > BAND_LIMIT_TOLERANCE:
            raise ResolutionError(
                f"Field carries {tail:.3g} of its energy above {fraction:.2f} x Nyquist ({self.grid.nyquist:.4g}); refine the grid"
            )

    def _check_compatible(self, other: 'SpatialField'):
        if other.grid != self.grid:
            raise ResolutionError("Fields live on different grids")

    def __add__(self, other: 'SpatialField') -> 'SpatialField':
        self._check_compatible(other)
        return SpatialField(self.grid, self.values + other.values)

    def __sub__(self, other: 'SpatialField') -> 'SpatialField':
        self._check_compatible(other)
        return SpatialField(self.grid, self.values - other.values)

    def __mul__(self, scalar: complex) -> 'SpatialField':
        return SpatialField(self.grid, self.values * scalar)

    __rmul__ = __mul__


def commensurate_half_width(minimum: float, period: float) -> float:
    """Smallest half-width >= minimum whose box length is a whole number of periods."""
    if minimum <= 0 or period <= 0:
        raise ParameterError(f"Need positive extents, got minimum = {minimum}, period = {period}")
    return period / 2 * max(1, math.ceil(2 * minimum / period - 1e-12))
