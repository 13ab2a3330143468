import dataclasses
import itertools
import logging
import math
from concurrent.futures import Executor
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from dataclasses_json import DataClassJsonMixin
from tqdm import tqdm

from .consts import MIN_FIT_POINTS, MIN_SWEEP_POINTS, MIN_CUBE_RESOLUTION, SINGULAR_CONDITION, \
    DEFAULT_LOCALIZATION_FACTOR, DEFAULT_DELTA, NYQUIST_MARGIN, WINDOW_WIDTHS, TIME_FREQUENCY_STEP
from .errors import FitError, ParameterError, ResolutionError
from .flow import Bicharacteristic, averaged_hessian
from .grids import SpatialGrid, SpatialField
from .phase_space import ScaleParams, coherent_state
from .propagate import FieldTrajectory, PropagationMethod, WavePacket, propagate_reference
from .symbols import LossBudget, SymbolModel, loss_budget
from .utils import LogLogFit, array_field, loglog_fit, plateau_bump

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class SpaceTimeCube(DataClassJsonMixin):
    """Cube of side `side` centered at (x_center, t_center); `resolution` is the sampling floor per side."""
    x_center: tuple[float, ...]
    t_center: float
    side: float
    resolution: int = MIN_CUBE_RESOLUTION

    def __post_init__(self):
        object.__setattr__(self, "x_center", tuple(float(v) for v in np.atleast_1d(self.x_center)))
        if self.side <= 0:
            raise ParameterError(f"Cube side must be positive, got {self.side}")
        if self.resolution < MIN_CUBE_RESOLUTION:
            raise ParameterError(f"Cube resolution must be >= {MIN_CUBE_RESOLUTION}, got {self.resolution}")

    @property
    def dim(self) -> int:
        return len(self.x_center)

    @property
    def t_bounds(self) -> tuple[float, float]:
        return self.t_center - self.side / 2, self.t_center + self.side / 2

    @property
    def volume(self) -> float:
        return self.side ** (self.dim + 1)


def _cell_edges(times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mids = (times[1:] + times[:-1]) / 2
    first = times[0] - (times[1] - times[0]) / 2 if len(times) > 1 else times[0]
    last = times[-1] + (times[-1] - times[-2]) / 2 if len(times) > 1 else times[-1]
    return np.concatenate([[first], mids]), np.concatenate([mids, [last]])


def _overlap(lo: np.ndarray, hi: np.ndarray, a: float, b: float) -> np.ndarray:
    return np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0.0, None)


def _spatial_weights(grid: SpatialGrid, cube: SpaceTimeCube) -> np.ndarray:
    """Overlap of every grid cell with the cube's spatial box."""
    h, half = grid.spacing, cube.side / 2
    delta = grid.displacement(cube.x_center)
    per_axis = _overlap(delta - h / 2, delta + h / 2, -half, half)
    return np.prod(per_axis, axis=-1)


def _time_weights(times: np.ndarray, cube: SpaceTimeCube) -> np.ndarray:
    lo, hi = cube.t_bounds
    slack = 1e-9 * cube.side
    if times[0] > lo + slack or times[-1] < hi - slack:
        raise ResolutionError(f"Time samples [{times[0]:.4g}, {times[-1]:.4g}] do not cover the cube's [{lo:.4g}, {hi:.4g}]")
    inside = int(np.sum((times >= lo - slack) & (times <= hi + slack)))
    if inside < cube.resolution:
        raise ResolutionError(f"{inside} time samples inside the cube, need at least {cube.resolution}")
    left, right = _cell_edges(times)
    return _overlap(left, right, lo, hi)


def pointwise_product(first: FieldTrajectory, second: FieldTrajectory) -> FieldTrajectory:
    if first.grid != second.grid or not np.array_equal(first.times, second.times):
        raise ResolutionError("Trajectories are sampled differently")
    return dataclasses.replace(first, values=first.values * second.values, norm_drift=0.0)


def lp_spacetime_norm(traj: FieldTrajectory, p: float, cube: SpaceTimeCube) -> float:
    """(int int_cube |u|^p dx dt)^(1/p) with cell-overlap quadrature weights."""
    if p < 1:
        raise ParameterError(f"Exponent p must be >= 1, got {p}")
    if cube.dim != traj.grid.dim:
        raise ParameterError(f"{cube.dim}-dimensional cube for a {traj.grid.dim}-dimensional trajectory")
    if traj.grid.spacing > cube.side / cube.resolution * (1 + 1e-12):
        raise ResolutionError(f"Grid spacing {traj.grid.spacing:.4g} too coarse for a cube of side {cube.side:.4g}")
    wt = _time_weights(np.asarray(traj.times, dtype=float), cube)
    wx = _spatial_weights(traj.grid, cube)
    rows = np.nonzero(wt > 0)[0]
    total = sum(wt[k] * float(np.sum(wx * np.abs(traj.values[k]) ** p)) for k in rows)
    return float(total) ** (1 / p)


# Dispersive decay


@dataclasses.dataclass(frozen=True, eq=False)
class DispersiveReport(DataClassJsonMixin):
    times: np.ndarray = array_field()
    sups: np.ndarray = array_field()
    l1_norm: float = 0.0
    fit: LogLogFit | None = None

    @property
    def slope(self) -> float:
        return self.fit.slope

    def rows(self) -> list[dict]:
        return [{"t": float(t), "sup": float(s), "sup_over_l1": float(s / self.l1_norm)} for t, s in zip(self.times, self.sups)]


def dispersive_fit(
        symbol: SymbolModel,
        u0: SpatialField,
        times: Sequence[float],
        method: PropagationMethod | str | None = None,
        step: float | None = None,
) -> DispersiveReport:
    """Slope of log ||u(t)||_inf against log(1 + t) over positive times; t = 0 is kept as the normalization row."""
    positive = sorted(float(t) for t in times if t > 0)
    if len(positive) < MIN_FIT_POINTS:
        raise FitError(f"Need at least {MIN_FIT_POINTS} positive times, got {len(positive)}")
    if method is None:
        method = PropagationMethod.EXPONENTIAL if symbol.time_independent else PropagationMethod.RK4
    grid_times = np.asarray([0.0] + positive)
    trajectory = propagate_reference(symbol, u0, grid_times, step=step, method=method)
    sups = trajectory.sup_norms()
    fit = loglog_fit(1 + grid_times[1:], sups[1:], min_points=MIN_FIT_POINTS)
    logger.info("Dispersive slope for %s: %.4f (95%% CI %.4f..%.4f)", symbol.name, fit.slope, *fit.ci95)
    return DispersiveReport(times=grid_times, sups=sups, l1_norm=u0.l1_norm(), fit=fit)


# Transversality


@dataclasses.dataclass(frozen=True, eq=False)
class TransversalityReport(DataClassJsonMixin):
    t: float
    delta_v: np.ndarray = array_field()
    delta_v_norm: float = 0.0
    forms: list[float | None] = dataclasses.field(default_factory=list)
    projections: list[float] = dataclasses.field(default_factory=list)
    averaged_form: float | None = None
    singular: list[bool] = dataclasses.field(default_factory=list)


def _hessian_form(hessian: np.ndarray, vector: np.ndarray) -> float | None:
    with np.errstate(divide="ignore", invalid="ignore"):
        condition = float(np.linalg.cond(hessian))
    if not math.isfinite(condition) or condition > SINGULAR_CONDITION:
        return None
    return float(vector @ np.linalg.solve(hessian, vector))


def transversality_check(
        sym1: SymbolModel,
        sym2: SymbolModel,
        b1: Bicharacteristic,
        b2: Bicharacteristic,
        t: float,
        t_ref: float | None = None,
) -> TransversalityReport:
    """
    Group-velocity difference of two flows at time t and the functionals built on it.
    With t_ref the second flow's Hessian is also averaged over [t_ref, t].
    """
    x1, xi1, _ = b1.state_at(t)
    x2, xi2, _ = b2.state_at(t)
    delta_v = sym1.grad_xi(x1, t, xi1) - sym2.grad_xi(x2, t, xi2)
    forms, singular = [], []
    for symbol, x, xi in ((sym1, x1, xi1), (sym2, x2, xi2)):
        form = _hessian_form(symbol.hess_xi(x, t, xi), delta_v)
        forms.append(form)
        singular.append(form is None)
    projections = [
        float(np.dot(xi / np.linalg.norm(xi), delta_v)) if np.linalg.norm(xi) > 0 else 0.0
        for xi in (xi1, xi2)
    ]
    averaged_form = None
    if t_ref is not None and t_ref != t:
        averaged = averaged_hessian(sym2, b2, t_ref, t)
        if averaged.invertible:
            averaged_form = float(delta_v @ np.linalg.solve(averaged.matrix, delta_v))
    return TransversalityReport(
        t=float(t),
        delta_v=delta_v,
        delta_v_norm=float(np.linalg.norm(delta_v)),
        forms=forms,
        projections=projections,
        averaged_form=averaged_form,
        singular=singular,
    )


# Energy shells


def energy_difference(
        sym1: SymbolModel,
        sym2: SymbolModel,
        z: tuple[Sequence[float], float],
        xi1: Sequence[float],
        xi2p: Sequence[float],
        eta: np.ndarray,
) -> np.ndarray:
    """F(eta) = p1(z, xi1) + p2(z, eta + xi2' - xi1) - p1(z, eta) - p2(z, xi2'), vectorized over eta (..., d)."""
    x, t = np.asarray(z[0], dtype=float), float(z[1])
    xi1, xi2p = np.asarray(xi1, dtype=float), np.asarray(xi2p, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return sym1.value(x, t, xi1) + sym2.value(x, t, eta + xi2p - xi1) - sym1.value(x, t, eta) - sym2.value(x, t, xi2p)


def energy_gradient(sym1: SymbolModel, sym2: SymbolModel, z: tuple[Sequence[float], float], xi1, xi2p, eta: np.ndarray) -> np.ndarray:
    x, t = np.asarray(z[0], dtype=float), float(z[1])
    xi1, xi2p = np.asarray(xi1, dtype=float), np.asarray(xi2p, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return sym2.grad_xi(x, t, eta + xi2p - xi1) - sym1.grad_xi(x, t, eta)


@dataclasses.dataclass(frozen=True, eq=False)
class EnergyShell(DataClassJsonMixin):
    tol: float
    points: np.ndarray = array_field()
    values: np.ndarray = array_field()

    def __len__(self) -> int:
        return len(self.points)

    def width(self, axis: int = 0) -> float:
        """Extent of the sampled shell along one frequency axis."""
        if len(self.points) == 0:
            return 0.0
        return float(np.ptp(self.points[:, axis]))


def energy_shell_sample(
        sym1: SymbolModel,
        sym2: SymbolModel,
        z: tuple[Sequence[float], float],
        xi1: Sequence[float],
        xi2p: Sequence[float],
        tol: float,
        grid: np.ndarray,
) -> EnergyShell:
    """Every sample eta of `grid` (shape (..., d)) with |F(eta)| <= tol, in row-major order."""
    if tol <= 0:
        raise ParameterError(f"Shell tolerance must be positive, got {tol}")
    grid = np.asarray(grid, dtype=float)
    dim = len(np.atleast_1d(xi1))
    flat = grid.reshape(-1, dim)
    values = energy_difference(sym1, sym2, z, xi1, xi2p, flat)
    keep = np.abs(values) <= tol
    return EnergyShell(tol=float(tol), points=flat[keep], values=values[keep])


# Conservation laws on a cube


@dataclasses.dataclass(frozen=True)
class ConservationFlags(DataClassJsonMixin):
    position_ok: bool
    momentum_ok: bool
    energy_ok: bool
    position_gap: float
    momentum_gap: float
    energy_gap: float

    @property
    def all_ok(self) -> bool:
        return self.position_ok and self.momentum_ok and self.energy_ok


def conservation_flags(
        quad: Sequence[WavePacket],
        q: SpaceTimeCube,
        params: ScaleParams,
        sym1: SymbolModel,
        sym2: SymbolModel,
) -> ConservationFlags:
    """Checks for the quadruple (T1, T1', T2, T2') at the cube's time center."""
    if len(quad) != 4:
        raise ParameterError(f"Need four packets (T1, T1', T2, T2'), got {len(quad)}")
    t_q = q.t_center
    states = [packet.bichar.state_at(t_q) for packet in quad]
    positions = [s[0] for s in states]
    frequencies = [s[1] for s in states]
    position_gap = max(
        float(np.linalg.norm(a - b)) for i, a in enumerate(positions) for b in positions[i + 1:]
    )
    momentum_gap = float(np.linalg.norm(frequencies[0] + frequencies[2] - frequencies[1] - frequencies[3]))
    x_q = np.asarray(q.x_center)
    energy_gap = abs(float(
        sym1.value(x_q, t_q, frequencies[0]) + sym2.value(x_q, t_q, frequencies[2])
        - sym1.value(x_q, t_q, frequencies[1]) - sym2.value(x_q, t_q, frequencies[3])
    ))
    spatial, frequency = params.spatial_tolerance(), params.frequency_tolerance()
    return ConservationFlags(
        position_ok=position_gap <= spatial,
        momentum_ok=momentum_gap <= frequency,
        energy_ok=energy_gap <= frequency,
        position_gap=position_gap,
        momentum_gap=momentum_gap,
        energy_gap=energy_gap,
    )


def _axis_shepard(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    nearest = np.rint(u)
    own = plateau_bump(2 * u) ** 4
    total = sum(plateau_bump(2 * (u - (nearest + n))) ** 4 for n in range(-2, 3))
    return own / total


def cube_weight(q: SpaceTimeCube, grid: SpatialGrid, times: np.ndarray) -> np.ndarray:
    """chi_q^4 normalized over the tiling by translates of q, shape (len(times), *grid.shape)."""
    spatial = np.prod(_axis_shepard(grid.displacement(q.x_center) / q.side), axis=-1)
    temporal = _axis_shepard((np.asarray(times, dtype=float) - q.t_center) / q.side)
    return temporal.reshape((-1,) + (1,) * grid.dim) * spatial[None]


def quadrilinear_integral(quad: Sequence[FieldTrajectory], q: SpaceTimeCube, weight: np.ndarray | None = None) -> complex:
    """int int chi_q^4 phi_T1 conj(phi_T1') phi_T2 conj(phi_T2')."""
    if len(quad) != 4:
        raise ParameterError(f"Need four trajectories (T1, T1', T2, T2'), got {len(quad)}")
    first = quad[0]
    for other in quad[1:]:
        if other.grid != first.grid or not np.array_equal(other.times, first.times):
            raise ResolutionError("Quadrilinear factors are sampled differently")
    times = np.asarray(first.times, dtype=float)
    if weight is None:
        weight = cube_weight(q, first.grid, times)
    left, right = _cell_edges(times)
    wt = right - left
    product = quad[0].values * np.conj(quad[1].values) * quad[2].values * np.conj(quad[3].values)
    per_time = np.sum((weight * product).reshape(len(times), -1), axis=1) * first.grid.cell_volume
    return complex(np.sum(wt * per_time))


# Bilinear sweep


@dataclasses.dataclass(frozen=True)
class BilinearCell(DataClassJsonMixin):
    R: float
    nu: float
    norm: float
    normalized: float = 1.0


@dataclasses.dataclass(frozen=True)
class BilinearSweep(DataClassJsonMixin):
    p: float
    cells: list[BilinearCell]
    nu_fits: dict[str, LogLogFit]
    r_fits: dict[str, LogLogFit]

    @property
    def nu_slope(self) -> float:
        return float(np.mean([f.slope for f in self.nu_fits.values()]))

    @property
    def r_slope(self) -> float:
        return float(max(f.slope for f in self.r_fits.values()))

    def rows(self) -> list[dict]:
        return [c.to_dict() for c in self.cells]


def bilinear_grid(R: float, nu: float, dim: int = 1) -> SpatialGrid:
    """Box that keeps both packets and their tails inside for |t| <= R/2, resolving frequencies up to nu/2."""
    half_width = max(R, R / 2 + 10 * math.sqrt(R))
    window = nu / 2 + WINDOW_WIDTHS / math.sqrt(R)
    return SpatialGrid.covering(dim, half_width, math.pi / (NYQUIST_MARGIN * max(window, 1.0)))


def opposing_coherent_states(R: float, nu: float, grid: SpatialGrid) -> tuple[SpatialField, SpatialField]:
    """Unit coherent states at the origin with frequencies +nu/2 and -nu/2 along the first axis."""
    xi = np.zeros(grid.dim)
    xi[0] = nu / 2
    origin = np.zeros(grid.dim)
    return coherent_state(origin, xi, R, grid).normalized(), coherent_state(origin, -xi, R, grid).normalized()


def bilinear_cell(
        sym1: SymbolModel,
        sym2: SymbolModel,
        R: float,
        nu: float,
        p: float,
        data_spec: Callable[[float, float, SpatialGrid], tuple[SpatialField, SpatialField]] = opposing_coherent_states,
        dim: int = 1,
) -> float:
    """||u1 u2||_{L^p(Q_R)} for the data pair at scale R and separation nu."""
    grid = bilinear_grid(R, nu, dim)
    u1, u2 = data_spec(R, nu, grid)
    cube = SpaceTimeCube(x_center=(0.0,) * dim, t_center=0.0, side=R)
    dt = math.sqrt(R) / 8
    count = int(round(R / dt))
    times = np.linspace(-R / 2, R / 2, count + 1)
    trajectories = []
    for symbol, u in ((sym1, u1), (sym2, u2)):
        method = PropagationMethod.EXPONENTIAL if symbol.time_independent else PropagationMethod.RK4
        trajectories.append(propagate_reference(symbol, u, times, method=method))
    return lp_spacetime_norm(pointwise_product(*trajectories), p, cube)


def bilinear_sweep(
        sym1: SymbolModel,
        sym2: SymbolModel,
        data_spec: Callable[[float, float, SpatialGrid], tuple[SpatialField, SpatialField]] | None,
        R_list: Sequence[float],
        nu_list: Sequence[float],
        p: float | None = None,
        executor: Executor | None = None,
        progress: bool = False,
) -> BilinearSweep:
    R_list, nu_list = sorted(R_list), sorted(nu_list, reverse=True)
    if len(R_list) < MIN_SWEEP_POINTS or len(nu_list) < MIN_SWEEP_POINTS:
        raise FitError(f"Need at least {MIN_SWEEP_POINTS} values of R and of nu, got {len(R_list)} and {len(nu_list)}")
    dim = sym1.dim
    p = (dim + 3) / (dim + 1) if p is None else p
    data_spec = opposing_coherent_states if data_spec is None else data_spec
    keys = [(R, nu) for R in R_list for nu in nu_list]

    def _cell(key: tuple[float, float]) -> float:
        return bilinear_cell(sym1, sym2, key[0], key[1], p, data_spec, dim)

    if executor is None:
        norms = [_cell(k) for k in tqdm(keys, desc="Bilinear sweep", disable=not progress)]
    else:
        norms = list(tqdm(executor.map(_cell, keys), total=len(keys), desc="Bilinear sweep", disable=not progress))
    return assemble_bilinear_sweep(p, R_list, nu_list, dict(zip(keys, norms)))


def assemble_bilinear_sweep(
        p: float,
        R_list: Sequence[float],
        nu_list: Sequence[float],
        table: dict[tuple[float, float], float],
) -> BilinearSweep:
    """Exponent fits over a full (R, nu) table of bilinear norms."""
    R_list, nu_list = sorted(R_list), sorted(nu_list, reverse=True)
    cells = []
    for R, nu in itertools.product(R_list, nu_list):
        anchor = table[(R, 1.0)] if (R, 1.0) in table else table[(R, nu_list[0])]
        cells.append(BilinearCell(R=float(R), nu=float(nu), norm=table[(R, nu)], normalized=table[(R, nu)] / anchor))
    nu_fits = {f"{R:g}": loglog_fit(nu_list, [table[(R, nu)] for nu in nu_list]) for R in R_list}
    r_fits = {f"{nu:g}": loglog_fit(R_list, [table[(R, nu)] for R in R_list]) for nu in nu_list}
    return BilinearSweep(p=float(p), cells=cells, nu_fits=nu_fits, r_fits=r_fits)


# Localization of evolved packets


@dataclasses.dataclass(frozen=True, eq=False)
class LocalizationReport(DataClassJsonMixin):
    r: float
    delta: float
    times: np.ndarray = array_field()
    spatial_tail: np.ndarray = array_field()
    frequency_tail: np.ndarray = array_field()
    time_frequency_tail: np.ndarray = array_field()
    tau_peak: np.ndarray = array_field()
    tau_expected: np.ndarray = array_field()
    tau_bin: np.ndarray = array_field()

    @property
    def max_tail(self) -> float:
        return float(max(np.max(self.spatial_tail), np.max(self.frequency_tail), np.max(self.time_frequency_tail)))

    @property
    def peaks_within_bin(self) -> bool:
        return bool(np.all(np.abs(self.tau_peak - self.tau_expected) <= self.tau_bin))

    def rows(self) -> list[dict]:
        return [
            {
                "r": self.r, "t": float(t), "spatial_tail": float(s), "frequency_tail": float(f),
                "time_frequency_tail": float(tf), "tau_peak": float(tp), "tau_expected": float(te),
            }
            for t, s, f, tf, tp, te in zip(
                self.times, self.spatial_tail, self.frequency_tail, self.time_frequency_tail, self.tau_peak, self.tau_expected
            )
        ]


def _tail_fraction(power: np.ndarray, outside: np.ndarray) -> float:
    total = float(np.sum(power))
    return float(np.sum(power[outside]) / total) if total > 0 else 0.0


def _window_times(t0: float, r: float, factor: float, tau: float) -> np.ndarray:
    step = min(TIME_FREQUENCY_STEP, math.pi / (4 * max(abs(tau), 1.0)))
    count = math.ceil(factor * math.sqrt(r) / step)
    return t0 + step * np.arange(-count, count + 1)


def localization_report(
        packet: WavePacket,
        symbol: SymbolModel,
        r: float,
        delta: float = DEFAULT_DELTA,
        t_grid: Sequence[float] = (0.0,),
        grid: SpatialGrid | None = None,
        method: PropagationMethod | str | None = None,
        factor: float = DEFAULT_LOCALIZATION_FACTOR,
) -> LocalizationReport:
    """
    Tail fractions of the exact-mode packet outside the factor * r^(1/2+delta) ball around x^t, the
    factor * r^(-1/2+delta) ball around xi^t, and, for a Gaussian time window of width r^(1/2), the
    factor * r^(-1/2+delta) neighborhood of tau = -p(x^t, t, xi^t).
    """
    if grid is None:
        if packet.profile is None:
            raise ParameterError("A grid is needed for packets without an initial profile")
        grid = packet.profile.grid
    if method is None:
        method = PropagationMethod.EXPONENTIAL if symbol.time_independent else PropagationMethod.RK4
    times = np.asarray(t_grid, dtype=float)
    packet.bichar.check_time(times)
    x_radius = factor * r ** (0.5 + delta)
    xi_radius = factor * r ** (-0.5 + delta)

    expected, windows = [], []
    for t0 in times:
        x, xi, _ = packet.bichar.state_at(t0)
        tau = -float(symbol.value(x, t0, xi))
        expected.append(tau)
        windows.append(_window_times(t0, r, factor, tau))
    all_times = np.unique(np.round(np.concatenate([times] + windows), 12))
    trajectory = propagate_reference(symbol, packet.initial_state(grid), all_times, method=method, initial_time=packet.bichar.start_time)

    spatial, frequency, time_frequency, peaks, bins = [], [], [], [], []
    for t0, tau, window in zip(times, expected, windows):
        x, xi, _ = packet.bichar.state_at(t0)
        values = trajectory.values[int(np.argmin(np.abs(all_times - t0)))]
        outside_x = np.linalg.norm(grid.displacement(x), axis=-1) > x_radius
        spatial.append(_tail_fraction(np.abs(values) ** 2, outside_x))
        outside_xi = np.linalg.norm(grid.frequencies - xi, axis=-1) > xi_radius
        frequency.append(_tail_fraction(np.abs(np.fft.fftn(values)) ** 2, outside_xi))

        rows = np.searchsorted(all_times, np.round(window, 12))
        step = window[1] - window[0]
        taper = np.exp(-(window - t0) ** 2 / (2 * r))
        block = trajectory.values[rows] * taper.reshape((-1,) + (1,) * grid.dim)
        power = np.sum(np.abs(np.fft.fft(block, axis=0)).reshape(len(window), -1) ** 2, axis=1)
        taus = 2 * np.pi * np.fft.fftfreq(len(window), step)
        time_frequency.append(_tail_fraction(power, np.abs(taus - tau) > xi_radius))
        peaks.append(float(taus[int(np.argmax(power))]))
        bins.append(2 * np.pi / (len(window) * step))

    return LocalizationReport(
        r=float(r),
        delta=float(delta),
        times=times,
        spatial_tail=np.asarray(spatial),
        frequency_tail=np.asarray(frequency),
        time_frequency_tail=np.asarray(time_frequency),
        tau_peak=np.asarray(peaks),
        tau_expected=np.asarray(expected),
        tau_bin=np.asarray(bins),
    )


# Energy bound and exponent bookkeeping


@dataclasses.dataclass(frozen=True)
class EnergyEstimateReport(DataClassJsonMixin):
    l1_norm: float
    count1: int
    count2: int
    bound: float

    @property
    def ratio(self) -> float:
        return self.l1_norm / self.bound if self.bound > 0 else 0.0


def energy_estimate_check(family1: Sequence[FieldTrajectory], family2: Sequence[FieldTrajectory], cube: SpaceTimeCube) -> EnergyEstimateReport:
    """||sum phi_T1 * sum phi_T2||_{L^1(S)} against (#T1)^(1/2) (#T2)^(1/2) times the cube's time side."""
    if not family1 or not family2:
        return EnergyEstimateReport(l1_norm=0.0, count1=len(family1), count2=len(family2), bound=0.0)
    first = dataclasses.replace(family1[0], values=np.sum([f.values for f in family1], axis=0))
    second = dataclasses.replace(family2[0], values=np.sum([f.values for f in family2], axis=0))
    l1 = lp_spacetime_norm(pointwise_product(first, second), 1.0, cube)
    bound = math.sqrt(len(family1) * len(family2)) * cube.side
    return EnergyEstimateReport(l1_norm=l1, count1=len(family1), count2=len(family2), bound=bound)


def strichartz_bookkeeping(s_values: Sequence[Fraction | float | str], d: int, q: Fraction | float | str | None = None) -> list[LossBudget]:
    return [loss_budget(s, d, q) for s in s_values]


def budget_rows(budgets: Sequence[LossBudget]) -> list[dict]:
    return [{k: ("" if v is None else str(v)) for k, v in b.to_dict().items()} for b in budgets]
