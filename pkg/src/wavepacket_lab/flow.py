import dataclasses
import itertools
import logging
import math
from concurrent.futures import Executor
from functools import cached_property, partial
from typing import Sequence

import numpy as np
from dataclasses_json import DataClassJsonMixin
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline

from .consts import MIN_FLOW_STEPS, DEFAULT_FLOW_STEPS, SINGULAR_CONDITION, LATTICE_TOLERANCE
from .errors import FlowEscapeError, ParameterError, TimeRangeError
from .phase_space import PhasePoint, PhaseSpaceRegion, d_r_metric
from .symbols import SymbolModel
from .utils import array_field, dump_csv

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class Bicharacteristic(DataClassJsonMixin):
    """
    Samples of (x(t), xi(t)) under x' = d_xi a, xi' = -d_x a together with the phase shift psi,
    psi(start_time) = 0. Times are strictly increasing and contain start_time.
    """
    times: np.ndarray = array_field()
    x: np.ndarray = array_field()
    xi: np.ndarray = array_field()
    psi: np.ndarray = array_field()
    velocities: np.ndarray = array_field()
    forces: np.ndarray = array_field()
    psi_dot: np.ndarray = array_field()
    start_time: float = 0.0
    steps: int = 0
    variational: np.ndarray | None = array_field(default=None)
    error_estimate: float = 0.0
    psi_ode_gap: float = 0.0

    @property
    def dim(self) -> int:
        return self.x.shape[-1]

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    @property
    def start(self) -> PhasePoint:
        return self.point_at(self.start_time)

    @cached_property
    def _splines(self) -> tuple[CubicHermiteSpline, CubicHermiteSpline, CubicHermiteSpline]:
        return (
            CubicHermiteSpline(self.times, self.x, self.velocities, axis=0),
            CubicHermiteSpline(self.times, self.xi, self.forces, axis=0),
            CubicHermiteSpline(self.times, self.psi, self.psi_dot, axis=0),
        )

    def check_time(self, t: float | np.ndarray):
        lo, hi = self.span
        t = np.asarray(t, dtype=float)
        slack = LATTICE_TOLERANCE * max(1.0, hi - lo)
        if np.any(t < lo - slack) or np.any(t > hi + slack):
            raise TimeRangeError(f"Time {t} outside trajectory span [{lo:.6g}, {hi:.6g}]")

    def state_at(self, t: float | np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        self.check_time(t)
        x_spline, xi_spline, psi_spline = self._splines
        t = np.clip(t, *self.span)
        return x_spline(t), xi_spline(t), psi_spline(t)

    def point_at(self, t: float) -> PhasePoint:
        x, xi, _ = self.state_at(t)
        return PhasePoint(x=x, xi=xi)

    def rows(self) -> list[dict]:
        rows = []
        for k, t in enumerate(self.times):
            row = {"t": float(t)}
            row.update((f"x{i}", float(v)) for i, v in enumerate(self.x[k]))
            row.update((f"xi{i}", float(v)) for i, v in enumerate(self.xi[k]))
            row["psi"] = float(self.psi[k])
            rows.append(row)
        return rows


def default_steps(T: float, R: float | None = None) -> int:
    if R is None:
        return DEFAULT_FLOW_STEPS
    return max(DEFAULT_FLOW_STEPS, math.ceil(8 * abs(T) / math.sqrt(R)))


def linearization(symbol: SymbolModel, x: np.ndarray, t: float, xi: np.ndarray) -> np.ndarray:
    """Matrix of the linearized Hamiltonian system in (dx, dxi) coordinates, shape (..., 2d, 2d)."""
    mixed = symbol.mixed_x_xi(x, t, xi)
    top = np.concatenate([np.swapaxes(mixed, -1, -2), symbol.hess_xi(x, t, xi)], axis=-1)
    bottom = np.concatenate([-symbol.hess_x(x, t, xi), -mixed], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def _derivative(symbol: SymbolModel, t: float, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    x, xi = state["x"], state["xi"]
    velocity = symbol.grad_xi(x, t, xi)
    energy = symbol.value(x, t, xi)
    out = {
        "x": velocity,
        "xi": -symbol.grad_x(x, t, xi),
        "psi": -energy + np.sum(xi * velocity, axis=-1),
        "action": energy,
    }
    if "Y" in state:
        out["Y"] = linearization(symbol, x, t, xi) @ state["Y"]
    return out


def _advance(state: dict[str, np.ndarray], slope: dict[str, np.ndarray], h: float) -> dict[str, np.ndarray]:
    return {k: v + h * slope[k] for k, v in state.items()}


def _rk4_leg(symbol: SymbolModel, state: dict[str, np.ndarray], t0: float, t1: float, n: int) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    times = np.linspace(t0, t1, n + 1)
    h = (t1 - t0) / n if n else 0.0
    samples = {k: [v] for k, v in state.items()}
    for t in times[:-1]:
        k1 = _derivative(symbol, t, state)
        k2 = _derivative(symbol, t + h / 2, _advance(state, k1, h / 2))
        k3 = _derivative(symbol, t + h / 2, _advance(state, k2, h / 2))
        k4 = _derivative(symbol, t + h, _advance(state, k3, h))
        state = {k: v + h / 6 * (k1[k] + 2 * k2[k] + 2 * k3[k] + k4[k]) for k, v in state.items()}
        for k, v in state.items():
            samples[k].append(v)
    return times, {k: np.stack(v) for k, v in samples.items()}


def _integrate(
        symbol: SymbolModel,
        start: PhasePoint,
        t_span: tuple[float, float],
        start_time: float,
        steps: int,
        with_variational: bool,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    lo, hi = t_span
    dim = start.dim
    initial = {
        "x": start.position.astype(float),
        "xi": start.frequency.astype(float),
        "psi": np.zeros(()),
        "action": np.zeros(()),
    }
    if with_variational:
        initial["Y"] = np.eye(2 * dim)
    h = (hi - lo) / steps
    legs = []
    for end in (lo, hi):
        n = round(abs(end - start_time) / h)
        if abs(end - start_time) > 0:
            legs.append(_rk4_leg(symbol, dict(initial), start_time, end, max(n, 1)))
    if not legs:
        raise ParameterError("Empty time span")
    if len(legs) == 1:
        times, data = legs[0]
        if times[-1] < times[0]:
            times, data = times[::-1], {k: v[::-1] for k, v in data.items()}
        return times, data
    (back_t, back), (fwd_t, fwd) = legs
    times = np.concatenate([back_t[::-1], fwd_t[1:]])
    return times, {k: np.concatenate([back[k][::-1], fwd[k][1:]]) for k in fwd}


def _escape_index(region: PhaseSpaceRegion | None, times: np.ndarray, start_time: float, x: np.ndarray, xi: np.ndarray) -> int | None:
    """First sample outside the region, counted from the start time in the direction of integration."""
    finite = np.all(np.isfinite(x), axis=-1) & np.all(np.isfinite(xi), axis=-1)
    outside = ~finite
    if region is not None:
        excess_x = region.spatial_excess(np.nan_to_num(x))
        excess_xi = region.frequency_excess(np.nan_to_num(xi))
        outside |= (excess_x > LATTICE_TOLERANCE * max(1.0, region.spatial_reach)) | (excess_xi > LATTICE_TOLERANCE)
    hits = np.flatnonzero(outside)
    if not hits.size:
        return None
    return int(hits[np.argmin(np.abs(times[hits] - start_time))])


def integrate_bicharacteristic(
        symbol: SymbolModel,
        start: PhasePoint,
        t_span: tuple[float, float],
        steps: int | None = None,
        start_time: float | None = None,
        region: PhaseSpaceRegion | None = None,
        with_variational: bool = False,
        estimate_error: bool = True,
        R: float | None = None,
) -> Bicharacteristic:
    lo, hi = float(min(t_span)), float(max(t_span))
    if hi <= lo:
        raise ParameterError(f"Time span must have positive length, got {t_span}")
    start_time = float(t_span[0]) if start_time is None else float(start_time)
    if not lo <= start_time <= hi:
        raise ParameterError(f"Start time {start_time} outside span [{lo}, {hi}]")
    if start.dim != symbol.dim:
        raise ParameterError(f"Start point of dimension {start.dim} for a {symbol.dim}-dimensional symbol")
    steps = default_steps(hi - lo, R) if steps is None else steps
    if steps < MIN_FLOW_STEPS:
        raise ParameterError(f"Need at least {MIN_FLOW_STEPS} steps, got {steps}")

    times, data = _integrate(symbol, start, (lo, hi), start_time, steps, with_variational)
    escape = _escape_index(region, times, start_time, data["x"], data["xi"])
    if escape is not None:
        raise FlowEscapeError(float(times[escape]))

    error = 0.0
    if estimate_error:
        fine_times, fine = _integrate(symbol, start, (lo, hi), start_time, 2 * steps, False)
        matched = np.abs(fine_times[None, :] - times[:, None]).argmin(axis=1)
        gap = np.hypot(
            np.linalg.norm(fine["x"][matched] - data["x"], axis=-1),
            np.linalg.norm(fine["xi"][matched] - data["xi"], axis=-1),
        )
        error = float(np.max(gap)) / 15

    t_col = times[:, None]
    velocities = symbol.grad_xi(data["x"], t_col[:, 0], data["xi"])
    forces = -symbol.grad_x(data["x"], t_col[:, 0], data["xi"])
    psi_dot = -symbol.value(data["x"], t_col[:, 0], data["xi"]) + np.sum(data["xi"] * velocities, axis=-1)

    psi, gap = data["psi"], 0.0
    if symbol.homogeneity in (1, 2):
        closed = (symbol.homogeneity - 1) * data["action"]
        gap = float(np.max(np.abs(closed - data["psi"])))
        psi = closed
        if symbol.homogeneity == 1:
            psi_dot = np.zeros_like(psi_dot)
    logger.debug("Bicharacteristic from %s over [%.4g, %.4g]: %d samples, error %.3g", start, lo, hi, len(times), error)
    return Bicharacteristic(
        times=times,
        x=data["x"],
        xi=data["xi"],
        psi=psi,
        velocities=velocities,
        forces=forces,
        psi_dot=psi_dot,
        start_time=start_time,
        steps=steps,
        variational=data.get("Y"),
        error_estimate=error,
        psi_ode_gap=gap,
    )


def integrate_many(
        symbol: SymbolModel,
        starts: Sequence[PhasePoint],
        t_span: tuple[float, float],
        steps: int | None = None,
        executor: Executor | None = None,
        **kwargs,
) -> list[Bicharacteristic]:
    task = partial(integrate_bicharacteristic, symbol, t_span=t_span, steps=steps, **kwargs)
    if executor is None:
        return [task(start) for start in starts]
    return list(executor.map(task, starts))


def variational_flow(symbol: SymbolModel, bichar: Bicharacteristic) -> np.ndarray:
    """d(x_t, xi_t)/d(x_0, xi_0) on the trajectory's time grid, shape (K, 2d, 2d)."""
    if bichar.variational is not None:
        return bichar.variational
    rerun = integrate_bicharacteristic(
        symbol, bichar.start, bichar.span, steps=bichar.steps, start_time=bichar.start_time,
        with_variational=True, estimate_error=False,
    )
    return rerun.variational


def symplectic_defect(variational: np.ndarray) -> dict[str, float]:
    dim = variational.shape[-1] // 2
    J = np.block([[np.zeros((dim, dim)), np.eye(dim)], [-np.eye(dim), np.zeros((dim, dim))]])
    form = np.swapaxes(variational, -1, -2) @ J @ variational
    return {
        "determinant": float(np.max(np.abs(np.linalg.det(variational) - 1))),
        "form": float(np.max(np.abs(form - J))),
    }


def finite_difference_jacobian(
        symbol: SymbolModel,
        start: PhasePoint,
        T: float,
        steps: int,
        h: float = 1e-5,
) -> np.ndarray:
    """Central-difference Jacobian of the time-T flow map with respect to (x_0, xi_0)."""
    dim = start.dim
    columns = []
    base = np.concatenate([start.position, start.frequency])
    for k in range(2 * dim):
        ends = []
        for sign in (1, -1):
            z = base.copy()
            z[k] += sign * h
            path = integrate_bicharacteristic(
                symbol, PhasePoint(x=z[:dim], xi=z[dim:]), (0.0, T), steps=steps, estimate_error=False
            )
            ends.append(np.concatenate([path.x[-1], path.xi[-1]]))
        columns.append((ends[0] - ends[1]) / (2 * h))
    return np.stack(columns, axis=-1)


@dataclasses.dataclass(frozen=True)
class RichardsonReport(DataClassJsonMixin):
    steps: tuple[int, int, int]
    errors: tuple[float, float]
    ratio: float


def richardson_ratio(symbol: SymbolModel, start: PhasePoint, T: float, steps: int) -> RichardsonReport:
    ends = []
    for n in (steps, 2 * steps, 4 * steps):
        path = integrate_bicharacteristic(symbol, start, (0.0, T), steps=n, estimate_error=False)
        ends.append(np.concatenate([path.x[-1], path.xi[-1]]))
    e1 = float(np.linalg.norm(ends[0] - ends[1]))
    e2 = float(np.linalg.norm(ends[1] - ends[2]))
    return RichardsonReport(steps=(steps, 2 * steps, 4 * steps), errors=(e1, e2), ratio=e1 / e2 if e2 > 0 else math.inf)


def trajectory_c2(symbol: SymbolModel, paths: Sequence[Bicharacteristic]) -> float:
    """Largest |d_xi^beta a|, |beta| <= 3, seen along the given trajectories."""
    peak = 0.0
    for path in paths:
        args = (path.x, path.times, path.xi)
        for evaluator in (symbol.value, symbol.grad_xi, symbol.hess_xi, symbol.third_xi):
            peak = max(peak, float(np.max(np.abs(evaluator(*args)))))
    return peak


@dataclasses.dataclass(frozen=True, eq=False)
class BilipschitzReport(DataClassJsonMixin):
    times: np.ndarray = array_field()
    ratios: np.ndarray = array_field()
    envelope: np.ndarray = array_field()
    c2: float = 0.0
    violations: int = 0
    skipped: list[int] = dataclasses.field(default_factory=list)

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.ratios)) if self.ratios.size else math.nan


def bilipschitz_report(
        symbol: SymbolModel,
        pairs: Sequence[tuple[PhasePoint, PhasePoint]],
        R: float,
        T: float,
        samples: int = 33,
        steps: int | None = None,
        c2: float | None = None,
) -> BilipschitzReport:
    if abs(T) > R * (1 + 1e-12):
        raise ParameterError(f"Horizon |T| = {abs(T)} exceeds R = {R}")
    span = (min(0.0, T), max(0.0, T))
    times = np.linspace(0.0, T, samples)
    kept, skipped, paths = [], [], []
    for index, (p1, p2) in enumerate(pairs):
        if d_r_metric(p1, p2, R) == 0:
            logger.info("Pair %d starts at a single point, skipped", index)
            skipped.append(index)
            continue
        first = integrate_bicharacteristic(symbol, p1, span, steps=steps, start_time=0.0, estimate_error=False, R=R)
        second = integrate_bicharacteristic(symbol, p2, span, steps=steps, start_time=0.0, estimate_error=False, R=R)
        kept.append((first, second))
        paths.extend((first, second))
    c2 = trajectory_c2(symbol, paths) if c2 is None else c2
    envelope = np.exp(2 * c2 * np.abs(times) / R)
    ratios = np.zeros((len(kept), samples))
    for row, (first, second) in enumerate(kept):
        x1, xi1, _ = first.state_at(times)
        x2, xi2, _ = second.state_at(times)
        distance = np.linalg.norm(x1 - x2, axis=-1) / math.sqrt(R) + math.sqrt(R) * np.linalg.norm(xi1 - xi2, axis=-1)
        ratios[row] = distance / distance[0]
    violations = int(np.sum(ratios > envelope * (1 + 1e-9)))
    if violations:
        logger.warning("Bi-Lipschitz envelope violated at %d samples", violations)
    return BilipschitzReport(times=times, ratios=ratios, envelope=envelope, c2=c2, violations=violations, skipped=skipped)


@dataclasses.dataclass(frozen=True, eq=False)
class SeparationReport(DataClassJsonMixin):
    times: np.ndarray = array_field()
    ratios: np.ndarray = array_field()
    pairs: list[tuple[int, int]] = dataclasses.field(default_factory=list)
    angular: bool = False
    skipped: list[tuple[int, int]] = dataclasses.field(default_factory=list)

    @property
    def min_ratio(self) -> float:
        return float(np.min(self.ratios)) if self.ratios.size else math.nan

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.ratios)) if self.ratios.size else math.nan


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    cosine = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return math.acos(max(-1.0, min(1.0, cosine)))


def separation_report(
        symbol: SymbolModel,
        x0: Sequence[float] | float,
        xis: Sequence[Sequence[float] | float],
        T: float,
        R: float,
        angular: bool = False,
        samples: int = 33,
        steps: int | None = None,
) -> SeparationReport:
    if abs(T) < math.sqrt(R):
        raise ParameterError(f"Horizon |T| = {abs(T)} shorter than R^(1/2) = {math.sqrt(R):.4g}")
    starts = [PhasePoint(x=x0, xi=xi) for xi in xis]
    span = (min(0.0, T), max(0.0, T))
    paths = [integrate_bicharacteristic(symbol, s, span, steps=steps, start_time=0.0, estimate_error=False, R=R) for s in starts]
    times = np.sign(T) * np.linspace(math.sqrt(R), abs(T), samples)
    kept, skipped, rows = [], [], []
    for i, j in itertools.combinations(range(len(starts)), 2):
        xi1, xi2 = starts[i].frequency, starts[j].frequency
        gap = _angle(xi1, xi2) if angular else float(np.linalg.norm(xi1 - xi2))
        if gap == 0:
            skipped.append((i, j))
            continue
        x1, _, _ = paths[i].state_at(times)
        x2, _, _ = paths[j].state_at(times)
        rows.append(np.linalg.norm(x1 - x2, axis=-1) / (np.abs(times) * gap))
        kept.append((i, j))
    ratios = np.stack(rows) if rows else np.zeros((0, samples))
    return SeparationReport(times=times, ratios=ratios, pairs=kept, angular=angular, skipped=skipped)


@dataclasses.dataclass(frozen=True, eq=False)
class AveragedHessian(DataClassJsonMixin):
    matrix: np.ndarray = array_field()
    condition: float = 1.0
    invertible: bool = True


def averaged_hessian(symbol: SymbolModel, bichar: Bicharacteristic, t_q: float, t: float, samples: int | None = None) -> AveragedHessian:
    if t == t_q:
        raise ParameterError("Averaging window has zero length")
    bichar.check_time([t_q, t])
    lo, hi = min(t_q, t), max(t_q, t)
    inside = int(np.sum((bichar.times > lo) & (bichar.times < hi)))
    n = samples if samples is not None else max(33, 2 * inside + 1)
    grid = np.linspace(lo, hi, n)
    x, xi, _ = bichar.state_at(grid)
    hessians = symbol.hess_xi(x, grid, xi)
    matrix = integrate.trapezoid(hessians, grid, axis=0) / (hi - lo)
    with np.errstate(divide="ignore"):
        condition = float(np.linalg.cond(matrix))
    invertible = bool(np.isfinite(condition) and condition <= SINGULAR_CONDITION)
    if not invertible:
        logger.info("Averaged Hessian over [%.4g, %.4g] is singular (condition %.3g)", lo, hi, condition)
    return AveragedHessian(matrix=matrix, condition=condition, invertible=invertible)


def time_reversal_error(symbol: SymbolModel, start: PhasePoint, T: float, steps: int = DEFAULT_FLOW_STEPS) -> float:
    forward = integrate_bicharacteristic(symbol, start, (0.0, T), steps=steps, estimate_error=False)
    end = forward.point_at(T)
    backward = integrate_bicharacteristic(symbol, end, (0.0, T), steps=steps, start_time=T, estimate_error=False)
    returned = backward.point_at(0.0)
    return float(np.hypot(
        np.linalg.norm(returned.position - start.position),
        np.linalg.norm(returned.frequency - start.frequency),
    ))


@dataclasses.dataclass(frozen=True)
class HomogeneityReport(DataClassJsonMixin):
    scale: float
    position_gap: float
    frequency_gap: float


def homogeneity_report(symbol: SymbolModel, start: PhasePoint, T: float, scale: float = 2.0, steps: int = DEFAULT_FLOW_STEPS) -> HomogeneityReport:
    """For a 1-homogeneous symbol, scaling xi_0 by lambda keeps x_t and scales xi_t."""
    if symbol.homogeneity != 1:
        raise ParameterError(f"Symbol '{symbol.name}' is not 1-homogeneous")
    span = (min(0.0, T), max(0.0, T))
    base = integrate_bicharacteristic(symbol, start, span, steps=steps, start_time=0.0, estimate_error=False)
    scaled = integrate_bicharacteristic(
        symbol, PhasePoint(x=start.x, xi=scale * start.frequency), span, steps=steps, start_time=0.0, estimate_error=False
    )
    return HomogeneityReport(
        scale=scale,
        position_gap=float(np.max(np.abs(base.x - scaled.x))),
        frequency_gap=float(np.max(np.abs(scale * base.xi - scaled.xi))),
    )


async def write_trajectory_csv(path: str, bichar: Bicharacteristic):
    await dump_csv(path, bichar.rows())
