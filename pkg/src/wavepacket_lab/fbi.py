import dataclasses
import logging
import math
from concurrent.futures import Executor
from functools import cached_property

import numpy as np
from dataclasses_json import DataClassJsonMixin

from .consts import SAMPLES_PER_WIDTH, NYQUIST_MARGIN, WINDOW_WIDTHS, HALF_WIDTH_FACTOR, MIN_HALF_WIDTH_FACTOR, \
    TRANSFORM_CHUNK, LOCALIZE_TRANSITION_WIDTH
from .errors import ParameterError, ResolutionError
from .grids import SpatialGrid, SpatialField
from .phase_space import Lattice, PhaseSpaceRegion, partition_weights
from .utils import array_field, dump_binary, periodic_delta, smooth_step

__all__ = [
    "SpatialGrid", "SpatialField", "PhaseSpaceGrid", "PhaseSpaceField", "LocalizeReport",
    "transform_constant", "phase_space_grid_for", "fbi_forward", "fbi_adjoint", "localize",
    "localize_with_report", "packet_coefficients", "magnitude_table", "save_phase_space_field",
]

logger = logging.getLogger(__name__)


def transform_constant(R: float, dim: int) -> float:
    """C_R with C_R^2 (2 pi)^d (pi R)^{d/2} = 1, which makes the transform an isometry for dx dxi."""
    return 2 ** (-dim / 2) * math.pi ** (-3 * dim / 4) * R ** (-dim / 4)


@dataclasses.dataclass(frozen=True)
class PhaseSpaceGrid(DataClassJsonMixin):
    """
    Sample points of the transform. Position centers form a periodic sublattice of the spatial grid,
    frequencies are the full discrete Fourier grid of the spatial grid.
    """
    spatial: SpatialGrid
    R: float
    x_count: int

    def __post_init__(self):
        if self.R <= 0:
            raise ParameterError(f"Scale must be positive, got {self.R}")
        if math.sqrt(self.R) > self.spatial.half_width / MIN_HALF_WIDTH_FACTOR:
            raise ResolutionError(
                f"Gaussian width {math.sqrt(self.R):.4g} exceeds L / {MIN_HALF_WIDTH_FACTOR:g} = "
                f"{self.spatial.half_width / MIN_HALF_WIDTH_FACTOR:.4g}"
            )
        if self.x_count < 1 or self.spatial.points % self.x_count != 0:
            raise ParameterError(f"Center count {self.x_count} must divide {self.spatial.points}")

    @staticmethod
    def build(spatial: SpatialGrid, R: float, samples_per_width: float = SAMPLES_PER_WIDTH) -> 'PhaseSpaceGrid':
        needed = math.ceil(spatial.period * samples_per_width / math.sqrt(R))
        count = min(spatial.points, 1 << max(needed - 1, 0).bit_length())
        return PhaseSpaceGrid(spatial=spatial, R=float(R), x_count=count)

    @property
    def dim(self) -> int:
        return self.spatial.dim

    @property
    def x_spacing(self) -> float:
        return self.spatial.period / self.x_count

    @property
    def xi_spacing(self) -> float:
        return math.pi / self.spatial.half_width

    @property
    def frequency_window(self) -> float:
        return self.spatial.nyquist

    @property
    def cell_volume(self) -> float:
        return (self.x_spacing * self.xi_spacing) ** self.dim

    @property
    def center_count(self) -> int:
        return self.x_count ** self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.center_count,) + self.spatial.shape

    @cached_property
    def x_centers(self) -> np.ndarray:
        axis = -self.spatial.half_width + self.x_spacing * np.arange(self.x_count)
        centers = np.stack(np.meshgrid(*([axis] * self.dim), indexing="ij"), axis=-1).reshape(-1, self.dim)
        centers.setflags(write=False)
        return centers

    @property
    def constant(self) -> float:
        return transform_constant(self.R, self.dim)


def phase_space_grid_for(
        R: float,
        dim: int = 1,
        max_frequency: float = 1.0,
        half_width: float | None = None,
        samples_per_width: float = SAMPLES_PER_WIDTH,
) -> PhaseSpaceGrid:
    """Grid whose box keeps HALF_WIDTH_FACTOR Gaussian widths and whose window covers max_frequency with margin."""
    width = math.sqrt(R)
    half_width = HALF_WIDTH_FACTOR * width if half_width is None else half_width
    window = max_frequency + WINDOW_WIDTHS / width
    spatial = SpatialGrid.covering(dim, half_width, math.pi / (NYQUIST_MARGIN * window))
    return PhaseSpaceGrid.build(spatial, R, samples_per_width)


@dataclasses.dataclass(frozen=True, eq=False)
class PhaseSpaceField(DataClassJsonMixin):
    """Samples F[j, n] = T_R f(x_j, xi_n); axis 0 enumerates position centers in row-major order."""
    psgrid: PhaseSpaceGrid
    values: np.ndarray = array_field()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.shape != self.psgrid.shape:
            raise ResolutionError(f"Phase-space samples of shape {values.shape} do not fit grid {self.psgrid.shape}")
        object.__setattr__(self, "values", values)

    @property
    def R(self) -> float:
        return self.psgrid.R

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.psgrid.cell_volume))

    def inner(self, other: 'PhaseSpaceField') -> complex:
        if other.psgrid != self.psgrid:
            raise ResolutionError("Phase-space fields live on different grids")
        return complex(np.sum(self.values * np.conj(other.values)) * self.psgrid.cell_volume)

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def peak(self) -> tuple[np.ndarray, np.ndarray]:
        """Position and frequency of the largest sample."""
        j, *n = np.unravel_index(np.argmax(np.abs(self.values)), self.values.shape)
        return self.psgrid.x_centers[j], self.psgrid.spatial.frequencies[tuple(n)]

    def __mul__(self, mask: np.ndarray | float) -> 'PhaseSpaceField':
        return PhaseSpaceField(self.psgrid, self.values * mask)

    __rmul__ = __mul__


def _modulation(psgrid: PhaseSpaceGrid, centers: np.ndarray) -> np.ndarray:
    """e^{i xi_n (x_j - y_0)} with y_0 the first grid point."""
    offset = centers + psgrid.spatial.half_width
    return np.exp(1j * np.einsum("cd,...d->c...", offset, psgrid.spatial.frequencies))


def _windows(psgrid: PhaseSpaceGrid, centers: np.ndarray) -> np.ndarray:
    spatial = psgrid.spatial
    delta = periodic_delta(spatial.coordinates[None], centers.reshape((-1,) + (1,) * spatial.dim + (spatial.dim,)), spatial.period)
    return np.exp(-np.sum(delta ** 2, axis=-1) / (2 * psgrid.R))


def _chunks(psgrid: PhaseSpaceGrid) -> list[slice]:
    total = psgrid.center_count
    return [slice(k, min(k + TRANSFORM_CHUNK, total)) for k in range(0, total, TRANSFORM_CHUNK)]


def _forward_chunk(psgrid: PhaseSpaceGrid, values: np.ndarray, block: slice) -> np.ndarray:
    centers = psgrid.x_centers[block]
    axes = tuple(range(1, 1 + psgrid.dim))
    spectrum = np.fft.fftn(values[None] * _windows(psgrid, centers), axes=axes)
    return psgrid.constant * psgrid.spatial.cell_volume * _modulation(psgrid, centers) * spectrum


def _adjoint_chunk(psgrid: PhaseSpaceGrid, values: np.ndarray, block: slice) -> np.ndarray:
    centers = psgrid.x_centers[block]
    axes = tuple(range(1, 1 + psgrid.dim))
    spatial = psgrid.spatial
    # sum_n e^{i xi_n y_m} G_n = N^d ifft(e^{i xi_n y_0} G)_m
    samples = np.fft.ifftn(np.conj(_modulation(psgrid, centers)) * values[block], axes=axes) * spatial.points ** spatial.dim
    scale = psgrid.constant * (psgrid.x_spacing * psgrid.xi_spacing) ** psgrid.dim
    return scale * np.sum(_windows(psgrid, centers) * samples, axis=0)


def _run(tasks, executor: Executor | None) -> list:
    if executor is None:
        return [task() for task in tasks]
    return [future.result() for future in [executor.submit(task) for task in tasks]]


def fbi_forward(f: SpatialField, R: float, psgrid: PhaseSpaceGrid | None = None, executor: Executor | None = None) -> PhaseSpaceField:
    """
    T_R f(x, xi) = C_R int e^{i xi (x - y)} e^{-(x - y)^2 / 2R} f(y) dy, evaluated for every position center
    as one discrete Fourier transform of the windowed data.
    """
    psgrid = PhaseSpaceGrid.build(f.grid, R) if psgrid is None else psgrid
    if psgrid.spatial != f.grid:
        raise ResolutionError("Field grid differs from the phase-space grid's spatial grid")
    if not math.isclose(psgrid.R, R, rel_tol=1e-12):
        raise ResolutionError(f"Phase-space grid was built for R = {psgrid.R}, not {R}")
    f.check_band_limit()
    tasks = [lambda block=block: _forward_chunk(psgrid, f.values, block) for block in _chunks(psgrid)]
    values = np.concatenate(_run(tasks, executor), axis=0)
    return PhaseSpaceField(psgrid, values)


def fbi_adjoint(F: PhaseSpaceField, R: float, grid: SpatialGrid | None = None, executor: Executor | None = None) -> SpatialField:
    """T_R^* F(y) = C_R int int e^{-(x - y)^2 / 2R} e^{-i xi (x - y)} F(x, xi) dx dxi by Riemann sums."""
    psgrid = F.psgrid
    grid = psgrid.spatial if grid is None else grid
    if grid != psgrid.spatial:
        raise ResolutionError("Target grid differs from the phase-space grid's spatial grid")
    if not math.isclose(psgrid.R, R, rel_tol=1e-12):
        raise ResolutionError(f"Phase-space field was produced at R = {psgrid.R}, not {R}")
    tasks = [lambda block=block: _adjoint_chunk(psgrid, F.values, block) for block in _chunks(psgrid)]
    return SpatialField(grid, sum(_run(tasks, executor)))


def localization_mask(psgrid: PhaseSpaceGrid, region: PhaseSpaceRegion, r: float) -> np.ndarray:
    """Smooth mask, 1 on the region and 0 beyond LOCALIZE_TRANSITION_WIDTH in d_r units outside it."""
    width = LOCALIZE_TRANSITION_WIDTH
    spatial = region.spatial_excess(psgrid.x_centers, psgrid.spatial.period) / (width * math.sqrt(r))
    frequency = region.frequency_excess(psgrid.spatial.frequencies) * math.sqrt(r) / width
    spatial_factor = 1 - smooth_step(spatial)
    frequency_factor = 1 - smooth_step(frequency)
    return spatial_factor.reshape((-1,) + (1,) * psgrid.dim) * frequency_factor[None]


@dataclasses.dataclass(frozen=True)
class LocalizeReport(DataClassJsonMixin):
    input_norm: float
    output_norm: float
    transition_mass: float
    idempotence_defect: float | None = None


def localize_with_report(
        f: SpatialField,
        region: PhaseSpaceRegion,
        r: float,
        check_idempotence: bool = False,
        executor: Executor | None = None,
) -> tuple[SpatialField, LocalizeReport]:
    if region.dim != f.grid.dim:
        raise ParameterError(f"Region of dimension {region.dim} on a {f.grid.dim}-dimensional grid")
    psgrid = PhaseSpaceGrid.build(f.grid, r)
    mask = localization_mask(psgrid, region, r)
    transformed = fbi_forward(f, r, psgrid, executor)
    band = (mask > 0) & (mask < 1)
    transition = PhaseSpaceField(psgrid, np.where(band, transformed.values, 0.0)).norm()
    output = fbi_adjoint(transformed * mask, r, executor=executor)
    defect = None
    if check_idempotence:
        twice = fbi_adjoint(fbi_forward(output, r, psgrid, executor) * mask, r, executor=executor)
        defect = (twice - output).norm()
    report = LocalizeReport(input_norm=f.norm(), output_norm=output.norm(), transition_mass=transition, idempotence_defect=defect)
    logger.debug("Localized at r = %.4g: %s", r, report)
    return output, report


def localize(f: SpatialField, region: PhaseSpaceRegion, r: float, executor: Executor | None = None) -> SpatialField:
    """Anti-Wick localization T_r^* m T_r to the region."""
    return localize_with_report(f, region, r, executor=executor)[0]


def packet_coefficients(f: SpatialField | PhaseSpaceField, lattice: Lattice, R: float) -> np.ndarray:
    """alpha_T = ||psi_T T_R f||, one entry per lattice point in lattice order."""
    transformed = fbi_forward(f, R) if isinstance(f, SpatialField) else f
    if not math.isclose(transformed.R, R, rel_tol=1e-12):
        raise ResolutionError(f"Phase-space field was produced at R = {transformed.R}, not {R}")
    if len(lattice) == 0:
        return np.zeros(0)
    psgrid = transformed.psgrid
    partition = partition_weights(lattice, R)
    power = np.abs(transformed.values.reshape(psgrid.center_count, -1)) ** 2
    alphas = np.zeros(len(lattice))
    for k, point in enumerate(lattice.points):
        fx, fxi = partition.axis_factors(point, psgrid.x_centers, psgrid.spatial.frequencies)
        alphas[k] = math.sqrt(max(float(fx ** 2 @ power @ (fxi ** 2).ravel()), 0.0) * psgrid.cell_volume)
    return alphas


def magnitude_table(F: PhaseSpaceField, stride: int = 1) -> list[dict]:
    psgrid = F.psgrid
    spatial = psgrid.spatial
    frequencies = np.fft.fftshift(spatial.frequencies, axes=tuple(range(spatial.dim)))
    magnitude = np.fft.fftshift(np.abs(F.values), axes=tuple(range(1, 1 + spatial.dim)))
    rows = []
    for j in range(0, psgrid.center_count, stride):
        for n in np.ndindex(*spatial.shape):
            if any(v % stride for v in n):
                continue
            row = {f"x{a}": float(psgrid.x_centers[j, a]) for a in range(spatial.dim)}
            row.update((f"xi{a}", float(frequencies[n][a])) for a in range(spatial.dim))
            row["magnitude"] = float(magnitude[(j,) + n])
            rows.append(row)
    return rows


@dataclasses.dataclass(frozen=True)
class PhaseSpaceFieldHeader(DataClassJsonMixin):
    psgrid: PhaseSpaceGrid
    R: float
    norm: float
    shape: tuple[int, ...]
    dtype: str = "<c16"


async def save_phase_space_field(path: str, F: PhaseSpaceField):
    header = PhaseSpaceFieldHeader(psgrid=F.psgrid, R=F.R, norm=F.norm(), shape=F.values.shape)
    await dump_binary(path, F.values, header)
