import dataclasses
import enum
import logging
import math
from concurrent.futures import Executor
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np
from dataclasses_json import DataClassJsonMixin
from scipy import linalg, sparse
from scipy.sparse import linalg as sparse_linalg

from .consts import STABILITY_BOUND, POWER_ITERATIONS, PACKET_THRESHOLD, UNITARITY_TOLERANCE, \
    DEFAULT_LOCALIZATION_FACTOR, AUTO_STEP_FRACTION, WEYL_SUM_CHUNK, WEYL_CACHE_SIZE, PACKET_FLOW_STEPS, \
    WEYL_PROBE_MAGNITUDES, WEYL_MODE_TOLERANCE, SPARSE_WEYL_FRACTION, DENSE_WEYL_LIMIT
from .errors import ParameterError, ResolutionError, StabilityError, TimeRangeError
from .fbi import PhaseSpaceField, fbi_adjoint, fbi_forward, packet_coefficients
from .flow import Bicharacteristic, integrate_many
from .grids import SpatialGrid, SpatialField
from .phase_space import PhasePoint, PhaseSpaceRegion, ScaleParams, coherent_state, lattice_points, partition_weights
from .symbols import FrequencyCutoff, SymbolModel
from .utils import array_field, dump_binary, dump_csv

logger = logging.getLogger(__name__)


class PropagationMethod(str, enum.Enum):
    RK4 = "rk4"
    EXPONENTIAL = "exponential"


class PacketMode(str, enum.Enum):
    FROZEN = "frozen"
    EXACT = "exact"


# Weyl quantization


def _weyl_table(symbol: SymbolModel, grid: SpatialGrid, t: float) -> np.ndarray:
    """Discrete Fourier transforms in x of a(x, t, s * pi / 2L), one column per integer frequency-sum vector s."""
    N, d = grid.points, grid.dim
    sums = np.arange(-N, N - 1)
    sum_vectors = np.stack(np.meshgrid(*([sums] * d), indexing="ij"), axis=-1).reshape(-1, d)
    midpoints = sum_vectors * (math.pi / grid.half_width) / 2
    x = grid.coordinates.reshape(-1, 1, d)
    table = np.empty((N ** d, len(midpoints)), dtype=complex)
    for start in range(0, len(midpoints), WEYL_SUM_CHUNK):
        chunk = midpoints[start:start + WEYL_SUM_CHUNK]
        values = np.broadcast_to(symbol.quantized(x, t, chunk[None]), (N ** d, len(chunk)))
        spectrum = np.fft.fftn(values.reshape(grid.shape + (len(chunk),)), axes=tuple(range(d)))
        table[:, start:start + len(chunk)] = spectrum.reshape(N ** d, len(chunk))
    return table


def _carried_modes(symbol: SymbolModel, grid: SpatialGrid, t: float) -> np.ndarray:
    """Flat indices of the x-Fourier modes the symbol carries, probed at a few fixed frequencies."""
    d = grid.dim
    directions = np.random.default_rng(0).normal(size=(len(WEYL_PROBE_MAGNITUDES), d))
    probes = directions / np.linalg.norm(directions, axis=-1, keepdims=True) * np.asarray(WEYL_PROBE_MAGNITUDES)[:, None]
    x = grid.coordinates.reshape(-1, 1, d)
    values = np.broadcast_to(symbol.quantized(x, t, probes[None]), (grid.points ** d, len(probes)))
    spectrum = np.abs(np.fft.fftn(values.reshape(grid.shape + (len(probes),)), axes=tuple(range(d))))
    spectrum = spectrum.reshape(grid.points ** d, len(probes)).max(axis=1)
    peak = float(spectrum.max())
    if peak == 0:
        return np.zeros(1, dtype=int)
    return np.flatnonzero(spectrum > WEYL_MODE_TOLERANCE * peak)


class WeylOperator:
    """
    Periodic Weyl quantization of a real symbol on a spatial grid, acting on discrete Fourier coefficients:
    A[k, l] = N^{-d} FFT_x[a(x, t, (xi_k + xi_l) / 2)](k - l). A is Hermitian for real symbols.

    x-independent symbols are stored as a diagonal. Symbols carrying few x-Fourier modes (a cosine metric on a
    commensurate box, say) are stored as a sparse matrix with one band per mode; everything else is dense.
    """

    def __init__(self, symbol: SymbolModel, grid: SpatialGrid, t: float = 0.0):
        if symbol.dim != grid.dim:
            raise ParameterError(f"{symbol.dim}-dimensional symbol on a {grid.dim}-dimensional grid")
        if symbol.cutoff != FrequencyCutoff.NONE and symbol.cutoff.support_radius > grid.nyquist:
            raise ResolutionError(
                f"Symbol support radius {symbol.cutoff.support_radius:g} exceeds the grid Nyquist frequency {grid.nyquist:.4g}"
            )
        self.symbol: SymbolModel = symbol
        self.grid: SpatialGrid = grid
        self.t: float = t
        self.diagonal: np.ndarray | None = None
        self.matrix: np.ndarray | sparse.csr_array | None = None
        size = grid.points ** grid.dim
        if symbol.x_independent:
            self.diagonal = np.real(symbol.quantized(np.zeros(grid.dim), t, grid.frequencies)).astype(complex)
            return
        modes = _carried_modes(symbol, grid, t)
        if len(modes) <= size // SPARSE_WEYL_FRACTION:
            logger.debug("Banded Weyl matrix with %d modes for %s on %s", len(modes), symbol.name, grid.shape)
            self.matrix = self._assemble_banded(modes)
        elif size > DENSE_WEYL_LIMIT:
            raise ResolutionError(
                f"Symbol {symbol.name} carries {len(modes)} x-modes on a {size}-point grid; "
                f"dense Weyl matrices are limited to {DENSE_WEYL_LIMIT} points"
            )
        else:
            self.matrix = self._assemble_dense()

    @property
    def kind(self) -> str:
        if self.diagonal is not None:
            return "diagonal"
        return "banded" if sparse.issparse(self.matrix) else "dense"

    def _assemble_dense(self) -> np.ndarray:
        grid = self.grid
        N, d = grid.points, grid.dim
        table = _weyl_table(self.symbol, grid, self.t)
        positions = np.indices(grid.shape).reshape(d, -1).T
        raw = np.rint(np.fft.fftfreq(N) * N).astype(int)[positions]
        sum_index = np.ravel_multi_index(tuple((raw[:, None, a] + raw[None, :, a] + N) for a in range(d)), (2 * N - 1,) * d)
        diff_index = np.ravel_multi_index(tuple((positions[:, None, a] - positions[None, :, a]) % N for a in range(d)), grid.shape)
        return table[diff_index, sum_index] / N ** d

    def _assemble_banded(self, modes: np.ndarray) -> sparse.csr_array:
        grid = self.grid
        N, d = grid.points, grid.dim
        size = N ** d
        positions = np.indices(grid.shape).reshape(d, -1).T
        raw = np.rint(np.fft.fftfreq(N) * N).astype(int)
        x = grid.coordinates.reshape(-1, 1, d)
        rows, cols, data = [], [], []
        for mode in modes:
            shift = np.array(np.unravel_index(mode, grid.shape))
            targets = (positions + shift) % N
            midpoints = (raw[targets] + raw[positions]) * (math.pi / grid.half_width) / 2
            phase = np.exp(-2j * np.pi * (positions @ shift) / N)
            band = np.empty(size, dtype=complex)
            for start in range(0, size, WEYL_SUM_CHUNK):
                chunk = midpoints[start:start + WEYL_SUM_CHUNK]
                values = np.broadcast_to(self.symbol.quantized(x, self.t, chunk[None]), (size, len(chunk)))
                band[start:start + len(chunk)] = phase @ values
            rows.append(np.ravel_multi_index(tuple(targets.T), grid.shape))
            cols.append(np.arange(size))
            data.append(band / size)
        return sparse.csr_array((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))

    def apply_spectrum(self, spectrum: np.ndarray) -> np.ndarray:
        if self.diagonal is not None:
            return self.diagonal * spectrum
        return (self.matrix @ spectrum.reshape(-1)).reshape(self.grid.shape)

    def apply(self, u: SpatialField) -> SpatialField:
        if u.grid != self.grid:
            raise ResolutionError("Field grid differs from the operator grid")
        return SpatialField(self.grid, np.fft.ifftn(self.apply_spectrum(np.fft.fftn(u.values))))

    @cached_property
    def norm(self) -> float:
        """Power-iteration estimate of the operator norm."""
        if self.diagonal is not None:
            return float(np.max(np.abs(self.diagonal)))
        rng = np.random.default_rng(0)
        vector = rng.normal(size=self.matrix.shape[0]) + 1j * rng.normal(size=self.matrix.shape[0])
        estimate = 0.0
        for _ in range(POWER_ITERATIONS):
            image = self.matrix @ vector
            estimate = float(np.linalg.norm(image) / np.linalg.norm(vector))
            if estimate == 0:
                break
            vector = image / np.linalg.norm(image)
        return estimate

    @cached_property
    def _eigensystem(self) -> tuple[np.ndarray, np.ndarray]:
        return linalg.eigh(self.matrix)

    def evolve_spectrum(self, spectrum: np.ndarray, dt: float) -> np.ndarray:
        """e^{-i dt A} applied exactly."""
        if self.diagonal is not None:
            return np.exp(-1j * dt * self.diagonal) * spectrum
        if sparse.issparse(self.matrix):
            return sparse_linalg.expm_multiply(-1j * dt * self.matrix, spectrum.reshape(-1)).reshape(self.grid.shape)
        values, vectors = self._eigensystem
        flat = vectors @ (np.exp(-1j * dt * values) * (vectors.conj().T @ spectrum.reshape(-1)))
        return flat.reshape(self.grid.shape)


@lru_cache(maxsize=WEYL_CACHE_SIZE)
def weyl_operator(symbol: SymbolModel, grid: SpatialGrid, t: float = 0.0) -> WeylOperator:
    return WeylOperator(symbol, grid, float(t))


def weyl_apply(symbol: SymbolModel, u: SpatialField, t: float = 0.0) -> SpatialField:
    time = 0.0 if symbol.time_independent else t
    return weyl_operator(symbol, u.grid, time).apply(u)


# Reference propagation


@dataclasses.dataclass(frozen=True, eq=False)
class FieldTrajectory(DataClassJsonMixin):
    grid: SpatialGrid
    times: np.ndarray = array_field()
    values: np.ndarray = array_field()
    method: PropagationMethod = PropagationMethod.RK4
    steps: int = 0
    norm_drift: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.shape != (len(self.times),) + self.grid.shape:
            raise ResolutionError(f"Trajectory samples of shape {values.shape} do not fit {len(self.times)} times on {self.grid.shape}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.times)

    def field(self, k: int) -> SpatialField:
        return SpatialField(self.grid, self.values[k])

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[k], t, rel_tol=1e-12, abs_tol=1e-12):
            raise TimeRangeError(f"Time {t} is not a sample of this trajectory")
        return k

    def at(self, t: float) -> SpatialField:
        return self.field(self.index_of(t))

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.values.reshape(len(self), -1)) ** 2, axis=1) * self.grid.cell_volume)

    def sup_norms(self) -> np.ndarray:
        return np.max(np.abs(self.values.reshape(len(self), -1)), axis=1)

    def scaled(self, factor: complex) -> 'FieldTrajectory':
        return dataclasses.replace(self, values=self.values * factor)

    def __sub__(self, other: 'FieldTrajectory') -> 'FieldTrajectory':
        if other.grid != self.grid or not np.array_equal(other.times, self.times):
            raise ResolutionError("Trajectories are sampled differently")
        return dataclasses.replace(self, values=self.values - other.values, norm_drift=0.0)

    def norm_rows(self) -> list[dict]:
        return [
            {"t": float(t), "L2": float(l2), "Linf": float(sup)}
            for t, l2, sup in zip(self.times, self.norms(), self.sup_norms())
        ]


@dataclasses.dataclass(frozen=True)
class TrajectoryHeader(DataClassJsonMixin):
    grid: SpatialGrid
    times: list[float]
    method: str
    steps: int
    norm_drift: float
    dtype: str = "<c16"


async def save_trajectory(path: str, trajectory: FieldTrajectory):
    header = TrajectoryHeader(
        grid=trajectory.grid,
        times=[float(t) for t in trajectory.times],
        method=PropagationMethod(trajectory.method).value,
        steps=trajectory.steps,
        norm_drift=trajectory.norm_drift,
    )
    await dump_binary(path, trajectory.values, header)


async def write_norm_table(path: str, trajectory: FieldTrajectory):
    await dump_csv(path, trajectory.norm_rows(), ["t", "L2", "Linf"])


def stability_step(symbol: SymbolModel, grid: SpatialGrid, t: float = 0.0) -> float:
    """Largest step with ||a^w|| h <= STABILITY_BOUND."""
    norm = weyl_operator(symbol, grid, 0.0 if symbol.time_independent else t).norm
    return math.inf if norm == 0 else STABILITY_BOUND / norm


def _rk4_leg(symbol: SymbolModel, grid: SpatialGrid, spectrum: np.ndarray, t0: float, t1: float, n: int) -> np.ndarray:
    h = (t1 - t0) / n

    def _rhs(t: float, s: np.ndarray) -> np.ndarray:
        time = 0.0 if symbol.time_independent else t
        return -1j * weyl_operator(symbol, grid, time).apply_spectrum(s)

    t = t0
    for _ in range(n):
        k1 = _rhs(t, spectrum)
        k2 = _rhs(t + h / 2, spectrum + h / 2 * k1)
        k3 = _rhs(t + h / 2, spectrum + h / 2 * k2)
        k4 = _rhs(t + h, spectrum + h * k3)
        spectrum = spectrum + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return spectrum


def propagate_reference(
        symbol: SymbolModel,
        u0: SpatialField,
        t_grid: Sequence[float],
        step: float | None = None,
        method: PropagationMethod | str = PropagationMethod.RK4,
        initial_time: float = 0.0,
) -> FieldTrajectory:
    """Solve du/dt = -i a^w u with u(initial_time) = u0 and sample it at t_grid."""
    method = PropagationMethod(method)
    times = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if times.ndim != 1 or len(times) == 0:
        raise ParameterError("Time grid must be a nonempty 1-D sequence")
    if np.any(np.diff(times) <= 0):
        raise ParameterError("Time grid must be strictly increasing")
    grid = u0.grid
    initial = np.fft.fftn(u0.values)
    spectra = np.empty((len(times),) + grid.shape, dtype=complex)
    total_steps = 0

    forward = [k for k in range(len(times)) if times[k] >= initial_time]
    backward = [k for k in reversed(range(len(times))) if times[k] < initial_time]

    if method == PropagationMethod.EXPONENTIAL:
        if not symbol.time_independent:
            raise ParameterError("The exponential path needs a time-independent symbol")
        operator = weyl_operator(symbol, grid, 0.0)
        if operator.kind != "banded":
            for k, t in enumerate(times):
                spectra[k] = operator.evolve_spectrum(initial, t - initial_time)
        else:
            # one expm_multiply leg per gap between consecutive samples
            for order in (forward, backward):
                spectrum, t = initial, initial_time
                for k in order:
                    if times[k] != t:
                        spectrum = operator.evolve_spectrum(spectrum, times[k] - t)
                        t = times[k]
                    spectra[k] = spectrum
    else:
        bound = stability_step(symbol, grid, initial_time)
        if step is not None and step > bound * (1 + 1e-12):
            raise StabilityError(step, bound)
        target = step if step is not None else AUTO_STEP_FRACTION * bound
        for order in (forward, backward):
            spectrum, t = initial, initial_time
            for k in order:
                gap = times[k] - t
                if gap != 0:
                    n = 1 if math.isinf(target) else max(1, math.ceil(abs(gap) / target))
                    spectrum = _rk4_leg(symbol, grid, spectrum, t, times[k], n)
                    total_steps += n
                    t = times[k]
                spectra[k] = spectrum

    values = np.fft.ifftn(spectra, axes=tuple(range(1, 1 + grid.dim)))
    for k, t in enumerate(times):
        if t == initial_time:
            values[k] = u0.values
    norms = np.sqrt(np.sum(np.abs(values.reshape(len(times), -1)) ** 2, axis=1) * grid.cell_volume)
    reference = u0.norm()
    drift = float(np.max(np.abs(norms - reference)) / reference) if reference > 0 else 0.0
    if drift > UNITARITY_TOLERANCE:
        logger.warning("Norm drift %.3g above %.1g for %s (%s, %d steps)", drift, UNITARITY_TOLERANCE, symbol.name, method.value, total_steps)
    return FieldTrajectory(grid=grid, times=times, values=values, method=method, steps=total_steps, norm_drift=drift)


def group_law_error(
        symbol: SymbolModel,
        u0: SpatialField,
        triples: Sequence[tuple[float, float, float]],
        method: PropagationMethod | str = PropagationMethod.RK4,
        step: float | None = None,
) -> list[float]:
    """Relative gap between S(t3, t2) S(t2, t1) u0 and S(t3, t1) u0 for each (t1, t2, t3)."""
    errors = []
    for t1, t2, t3 in triples:
        middle = propagate_reference(symbol, u0, [t2], step=step, method=method, initial_time=t1).field(0)
        composed = propagate_reference(symbol, middle, [t3], step=step, method=method, initial_time=t2).field(0)
        direct = propagate_reference(symbol, u0, [t3], step=step, method=method, initial_time=t1).field(0)
        errors.append((composed - direct).norm() / max(direct.norm(), 1e-300))
    return errors


# Wave packets


@dataclasses.dataclass(frozen=True, eq=False)
class WavePacket(DataClassJsonMixin):
    """
    A lattice-labelled packet at scale r. When `profile` is set it is the localized initial piece
    T_r^*(psi_T T_r u0) whose norm is `alpha`; otherwise the packet starts as the coherent state at its label.
    """
    label: PhasePoint
    alpha: float
    bichar: Bicharacteristic
    r: float
    profile: SpatialField | None = None

    @property
    def rho(self) -> float:
        return 1 / self.r

    def initial_state(self, grid: SpatialGrid) -> SpatialField:
        if self.profile is not None:
            if self.profile.grid != grid:
                raise ResolutionError("Packet profile lives on a different grid")
            return self.profile
        return coherent_state(self.label.x, self.label.xi, self.r, grid)


def frozen_packet(packet: WavePacket, t: float, grid: SpatialGrid) -> SpatialField:
    """e^{i psi} e^{i xi^t (y - x^t)} e^{-(y - x^t)^2 / 2r}, unit-normalized."""
    x, xi, psi = packet.bichar.state_at(t)
    delta = grid.displacement(x)
    phase = float(psi) + np.tensordot(delta, xi, axes=([-1], [0]))
    envelope = np.exp(-np.sum(delta ** 2, axis=-1) / (2 * packet.r))
    return SpatialField(grid, np.exp(1j * phase) * envelope).normalized()


def packet_evolve(
        packet: WavePacket,
        symbol: SymbolModel,
        t: float,
        grid: SpatialGrid,
        mode: PacketMode | str = PacketMode.FROZEN,
        method: PropagationMethod | str = PropagationMethod.RK4,
) -> SpatialField:
    packet.bichar.check_time(t)
    if PacketMode(mode) == PacketMode.FROZEN:
        return frozen_packet(packet, t, grid)
    initial = packet.initial_state(grid)
    trajectory = propagate_reference(symbol, initial, [t], method=method, initial_time=packet.bichar.start_time)
    return trajectory.field(0).normalized()


def evolve_packets(
        packets: Sequence[WavePacket],
        symbol: SymbolModel,
        t_grid: Sequence[float],
        grid: SpatialGrid,
        method: PropagationMethod | str = PropagationMethod.RK4,
        executor: Executor | None = None,
) -> list[FieldTrajectory]:
    """Exact-mode evolution of every packet's initial state, normalized by its coefficient when it has one."""

    def _evolve(packet: WavePacket) -> FieldTrajectory:
        trajectory = propagate_reference(symbol, packet.initial_state(grid), t_grid, method=method, initial_time=packet.bichar.start_time)
        if packet.profile is not None and packet.alpha > 0:
            return trajectory.scaled(1 / packet.alpha)
        return trajectory.scaled(1 / packet.initial_state(grid).norm())

    if executor is None:
        return [_evolve(p) for p in packets]
    return list(executor.map(_evolve, packets))


@dataclasses.dataclass(frozen=True, eq=False)
class Decomposition:
    packets: list[WavePacket]
    reference: FieldTrajectory
    packet_sum: FieldTrajectory
    lattice_size: int
    input_norm: float

    @cached_property
    def remainder(self) -> FieldTrajectory:
        return self.reference - self.packet_sum

    @property
    def remainder_l2(self) -> np.ndarray:
        return self.remainder.norms()

    @property
    def remainder_sup(self) -> np.ndarray:
        return self.remainder.sup_norms()

    @property
    def alpha_sq_sum(self) -> float:
        return float(sum(p.alpha ** 2 for p in self.packets))

    @property
    def frame_ratio(self) -> float:
        return self.alpha_sq_sum / self.input_norm ** 2 if self.input_norm > 0 else 0.0


def decomposition_region(region: PhaseSpaceRegion, r: float, factor: float = DEFAULT_LOCALIZATION_FACTOR) -> PhaseSpaceRegion:
    """The region grown by `factor` transform widths in both variables, where lattice labels are drawn from."""
    return region.with_margins(region.x_margin + factor * math.sqrt(r), region.xi_margin + factor / math.sqrt(r))


def wavepacket_decompose(
        u0: SpatialField,
        symbol: SymbolModel,
        r: float,
        region: PhaseSpaceRegion,
        t_grid: Sequence[float],
        params: ScaleParams | None = None,
        threshold: float = PACKET_THRESHOLD,
        method: PropagationMethod | str = PropagationMethod.RK4,
        step: float | None = None,
        flow_steps: int = PACKET_FLOW_STEPS,
        executor: Executor | None = None,
) -> Decomposition:
    """u(t) = sum_T alpha_T phi_T(t) + g(t) with exact-mode packets."""
    if params is not None:
        params.check_scale(r)
    if region.dim != u0.grid.dim:
        raise ParameterError(f"Region of dimension {region.dim} for data on a {u0.grid.dim}-dimensional grid")
    grid = u0.grid
    times = np.asarray(t_grid, dtype=float)
    lattice = lattice_points(r, decomposition_region(region, r))
    transformed = fbi_forward(u0, r)
    alphas = packet_coefficients(transformed, lattice, r)
    peak = float(np.max(alphas)) if alphas.size else 0.0
    kept = [k for k in range(len(lattice)) if peak > 0 and alphas[k] > threshold * peak]
    logger.info("Decomposition at r = %.4g: %d of %d lattice cells above threshold", r, len(kept), len(lattice))

    partition = partition_weights(lattice, r) if len(lattice) else None
    psgrid = transformed.psgrid
    profiles = []
    for k in kept:
        fx, fxi = partition.axis_factors(lattice.points[k], psgrid.x_centers, grid.frequencies)
        weight = fx.reshape((-1,) + (1,) * grid.dim) * fxi[None]
        profiles.append(fbi_adjoint(PhaseSpaceField(psgrid, transformed.values * weight), r))

    lo, hi = min(float(times.min()), 0.0), max(float(times.max()), 0.0)
    span = (lo, hi if hi > lo else lo + 1.0)
    labels = [lattice.points[k] for k in kept]
    bichars = integrate_many(symbol, labels, span, steps=flow_steps, executor=executor, start_time=0.0, estimate_error=False)
    packets = [
        WavePacket(label=label, alpha=float(alphas[k]), bichar=bichar, r=r, profile=profile)
        for k, label, bichar, profile in zip(kept, labels, bichars, profiles)
    ]

    total = grid.zeros()
    for profile in profiles:
        total = total + profile
    reference = propagate_reference(symbol, u0, times, step=step, method=method)
    packet_sum = propagate_reference(symbol, total, times, step=step, method=method)
    return Decomposition(packets=packets, reference=reference, packet_sum=packet_sum, lattice_size=len(lattice), input_norm=u0.norm())


# Parametrix and packet diagnostics


@dataclasses.dataclass(frozen=True, eq=False)
class DefectReport(DataClassJsonMixin):
    times: np.ndarray = array_field()
    defects: np.ndarray = array_field()

    @property
    def max_defect(self) -> float:
        return float(np.max(self.defects))


def parametrix_defect(symbol: SymbolModel, packet: WavePacket, t_grid: Sequence[float], grid: SpatialGrid) -> DefectReport:
    """||i d_t phi - a^w phi|| for the unit-normalized frozen packet, with d_t phi taken along the bicharacteristic."""
    times = np.asarray(t_grid, dtype=float)
    defects = np.zeros(len(times))
    for k, t in enumerate(times):
        x, xi, _ = packet.bichar.state_at(t)
        velocity = symbol.grad_xi(x, t, xi)
        force = -symbol.grad_x(x, t, xi)
        psi_dot = 0.0 if symbol.homogeneity == 1 else float(-symbol.value(x, t, xi) + np.dot(xi, velocity))
        phi = frozen_packet(packet, t, grid)
        delta = grid.displacement(x)
        rate = 1j * psi_dot + 1j * np.tensordot(delta, force, axes=([-1], [0])) - 1j * float(np.dot(xi, velocity)) \
            + np.tensordot(delta, velocity, axes=([-1], [0])) / packet.r
        time_derivative = SpatialField(grid, phi.values * rate)
        defects[k] = (1j * time_derivative - weyl_apply(symbol, phi, t)).norm()
    return DefectReport(times=times, defects=defects)


@dataclasses.dataclass(frozen=True, eq=False)
class AlmostOrthogonalityReport(DataClassJsonMixin):
    sizes: list[int]
    ratios: np.ndarray = array_field()

    @property
    def constant(self) -> float:
        return float(np.max(self.ratios)) if self.ratios.size else 0.0


def almost_orthogonality(
        fields: Sequence[SpatialField],
        sizes: Sequence[int] | None = None,
        draws: int = 8,
        seed: int = 0,
) -> AlmostOrthogonalityReport:
    """max over random subcollections of ||sum phi_T|| / (#subcollection)^{1/2}."""
    if not fields:
        return AlmostOrthogonalityReport(sizes=[], ratios=np.zeros(0))
    rng = np.random.default_rng(seed)
    sizes = sorted({1 << k for k in range(len(fields).bit_length())} | {len(fields)}) if sizes is None else list(sizes)
    stacked = np.stack([f.values for f in fields])
    cell = fields[0].grid.cell_volume
    ratios = []
    for size in sizes:
        if not 1 <= size <= len(fields):
            raise ParameterError(f"Subcollection size {size} outside [1, {len(fields)}]")
        best = 0.0
        for _ in range(draws if size < len(fields) else 1):
            chosen = rng.choice(len(fields), size=size, replace=False)
            norm = math.sqrt(float(np.sum(np.abs(stacked[chosen].sum(axis=0)) ** 2)) * cell)
            best = max(best, norm / math.sqrt(size))
        ratios.append(best)
    return AlmostOrthogonalityReport(sizes=sizes, ratios=np.asarray(ratios))


def _core_mask(grid: SpatialGrid, center: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(grid.displacement(center), axis=-1) <= radius


def essentially_constant_ratio(field: SpatialField, center: Sequence[float], r: float) -> float:
    """max |phi| / min |phi| over the r^{1/2}-ball around the packet center."""
    magnitude = np.abs(field.values[_core_mask(field.grid, np.asarray(center, dtype=float), math.sqrt(r))])
    if magnitude.size == 0 or float(np.min(magnitude)) == 0:
        return math.inf
    return float(np.max(magnitude) / np.min(magnitude))


@dataclasses.dataclass(frozen=True, eq=False)
class AmplitudeReport(DataClassJsonMixin):
    times: np.ndarray = array_field()
    sups: np.ndarray = array_field()
    reference: float = 1.0

    @property
    def constant(self) -> float:
        return float(np.max(self.sups) / self.reference)


def amplitude_report(trajectory: FieldTrajectory, packet: WavePacket) -> AmplitudeReport:
    """sup of |phi_T(t)| over the tube core compared with r^{-d/4}."""
    sups = np.zeros(len(trajectory))
    for k, t in enumerate(trajectory.times):
        x, _, _ = packet.bichar.state_at(t)
        core = _core_mask(trajectory.grid, x, math.sqrt(packet.r))
        sups[k] = float(np.max(np.abs(trajectory.values[k][core]))) if np.any(core) else 0.0
    return AmplitudeReport(times=np.asarray(trajectory.times), sups=sups, reference=packet.r ** (-trajectory.grid.dim / 4))
