import dataclasses
import enum
import logging
import math
from fractions import Fraction
from functools import partial
from typing import Any, Callable

import numpy as np
from dataclasses_json import DataClassJsonMixin

from .consts import SUPPORTED_DIMENSIONS, DEFAULT_DELTA, DEFAULT_DELTA0, DEFAULT_SCALE, DEFAULT_EPS, DEFAULT_TIME_SAMPLES, \
    MIN_SWEEP_POINTS, MIN_FLOW_STEPS, ISOMETRY_SCALES, ISOMETRY_SAMPLES, ISOMETRY_TOLERANCE, CLOSED_FORM_TOLERANCE, \
    RICHARDSON_RANGE, RICHARDSON_STEPS, RICHARDSON_HORIZON, SYMPLECTIC_TOLERANCE, BILIPSCHITZ_PAIRS, BILIPSCHITZ_CHUNK, \
    LOCALIZATION_SCALES, LOCALIZATION_TOLERANCE, LOCALIZATION_TIME_SAMPLES, PACKET_FREQUENCY, REMAINDER_TOLERANCE, \
    FRAME_TOLERANCE, DISPERSIVE_DATA_SCALE, DISPERSIVE_SPACING, DISPERSIVE_BOX_FACTOR, DISPERSIVE_TOLERANCE, \
    FREE_DISPERSIVE_TOLERANCE, BILINEAR_SCALES, NU_SWEEP, BILINEAR_NU_TOLERANCE, BILINEAR_R_SLOPE_MAX, \
    CONSERVATION_QUADRUPLES, CONSERVATION_FREQUENCY, CONSERVATION_MISMATCH, CONSERVATION_RATIO_MIN, TIME_FREQUENCY_STEP, \
    WINDOW_WIDTHS, TUBES_DELTA, TUBES_FAMILY_SIZE, EXTENT_FACTOR, BUDGET_S_VALUES
from .errors import ConfigError, ParameterError
from .estimates import (
    SpaceTimeCube, assemble_bilinear_sweep, bilinear_cell, budget_rows, conservation_flags, cube_weight, dispersive_fit,
    energy_shell_sample, localization_report, quadrilinear_integral, strichartz_bookkeeping,
)
from .fbi import fbi_adjoint, fbi_forward, localize, phase_space_grid_for
from .flow import bilipschitz_report, integrate_bicharacteristic, richardson_ratio, symplectic_defect
from .grids import SpatialField, SpatialGrid, commensurate_half_width
from .phase_space import PhasePoint, PhaseSpaceRegion, ScaleParams, coherent_state
from .propagate import PropagationMethod, WavePacket, amplitude_report, evolve_packets, parametrix_defect, wavepacket_decompose
from .symbols import (
    FourierMetricData, FrequencyCutoff, MetricField, MetricSymbol, SymbolKind, constant_metric, cosine_metric,
    make_halfwave, make_schrodinger, metric_from_data, perturbed_identity_metric,
)
from .tubes import CubeGrid, TubeFamily, TubeSet, double_end_count, focusing_relation, incidences, pigeonhole_buckets, tube_from_bichar

logger = logging.getLogger(__name__)


class ExperimentName(str, enum.Enum):
    ISOMETRY = "isometry"
    FLOW = "flow"
    LOCALIZATION = "localization"
    DECOMPOSE = "decompose"
    DISPERSIVE = "dispersive"
    BILINEAR = "bilinear"
    CONSERVATION = "conservation"
    TUBES = "tubes"
    BUDGET = "budget"


class MetricKind(str, enum.Enum):
    CONSTANT = "constant"
    PERTURBED = "perturbed"
    FILE = "file"


# Config


@dataclasses.dataclass(frozen=True)
class ScaleSpec(DataClassJsonMixin):
    R: float | None = None
    R_list: list[float] | None = None
    r: float | None = None
    r_list: list[float] | None = None
    nu_list: list[float] | None = None
    delta: float | None = None
    delta0: float | None = None


@dataclasses.dataclass(frozen=True)
class SymbolSpec(DataClassJsonMixin):
    kind: str = SymbolKind.SCHRODINGER.value
    metric: str = MetricKind.PERTURBED.value
    metric_path: str | None = None
    eps: float | None = None
    speeds: list[float] | None = None
    s_values: list[str] | None = None
    q: str | None = None
    dim: int = 1


@dataclasses.dataclass(frozen=True)
class GridSpec(DataClassJsonMixin):
    samples: int | None = None
    steps: int | None = None
    time_samples: int | None = None


@dataclasses.dataclass(frozen=True)
class ExperimentConfig(DataClassJsonMixin):
    experiment: str
    scale: ScaleSpec = dataclasses.field(default_factory=ScaleSpec)
    symbol: SymbolSpec = dataclasses.field(default_factory=SymbolSpec)
    grid: GridSpec = dataclasses.field(default_factory=GridSpec)
    output: str | None = None
    seed: int = 0

    @property
    def name(self) -> ExperimentName:
        return ExperimentName(self.experiment)

    @property
    def dim(self) -> int:
        return self.symbol.dim

    @property
    def R(self) -> float:
        return float(DEFAULT_SCALE if self.scale.R is None else self.scale.R)

    @property
    def eps(self) -> float:
        return float(DEFAULT_EPS if self.symbol.eps is None else self.symbol.eps)

    @property
    def delta(self) -> float:
        return float(DEFAULT_DELTA if self.scale.delta is None else self.scale.delta)

    @property
    def delta0(self) -> float:
        return float(DEFAULT_DELTA0 if self.scale.delta0 is None else self.scale.delta0)

    @property
    def speeds(self) -> list[float]:
        speeds = [1.0] if not self.symbol.speeds else [float(v) for v in self.symbol.speeds]
        return speeds if len(speeds) > 1 else speeds * 2

    def samples(self, default: int) -> int:
        return default if self.grid.samples is None else int(self.grid.samples)

    def steps(self, default: int) -> int:
        return default if self.grid.steps is None else int(self.grid.steps)

    def time_samples(self, default: int) -> int:
        return default if self.grid.time_samples is None else int(self.grid.time_samples)

    def validate(self):
        """Collect every offending field, then raise ConfigError once."""
        problems: dict[str, str] = {}
        try:
            name = self.name
        except (TypeError, ValueError):
            problems["experiment"] = f"unknown experiment '{self.experiment}', expected one of {[e.value for e in ExperimentName]}"
            raise ConfigError(problems)

        def _number(key: str, value: Any, low: float | None = None, high: float | None = None, strict_low: bool = False, strict_high: bool = False):
            if value is None:
                return
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                problems[key] = f"expected a finite number, got {value!r}"
                return
            if low is not None and (value <= low if strict_low else value < low):
                problems[key] = f"must be {'>' if strict_low else '>='} {low}, got {value}"
            elif high is not None and (value >= high if strict_high else value > high):
                problems[key] = f"must be {'<' if strict_high else '<='} {high}, got {value}"

        def _numbers(key: str, values: Any, minimum: int = 1, **bounds):
            if values is None:
                return
            if not isinstance(values, list) or len(values) < minimum:
                problems[key] = f"expected a list of at least {minimum} numbers, got {values!r}"
                return
            for index, value in enumerate(values):
                _number(f"{key}[{index}]", value, **bounds)

        def _integer(key: str, value: Any, low: int):
            if value is None:
                return
            if isinstance(value, bool) or not isinstance(value, int):
                problems[key] = f"expected an integer, got {value!r}"
            elif value < low:
                problems[key] = f"must be >= {low}, got {value}"

        scale, symbol, grid = self.scale, self.symbol, self.grid
        _number("scale.R", scale.R, low=1.0)
        _numbers("scale.R_list", scale.R_list, minimum=MIN_SWEEP_POINTS if name == ExperimentName.BILINEAR else 1, low=1.0)
        _number("scale.r", scale.r, low=1.0)
        _numbers("scale.r_list", scale.r_list, low=1.0)
        _numbers("scale.nu_list", scale.nu_list, minimum=MIN_SWEEP_POINTS if name == ExperimentName.BILINEAR else 1, low=0.0, high=1.0, strict_low=True)
        _number("scale.delta", scale.delta, low=0.0, high=0.5, strict_low=True, strict_high=True)
        _number("scale.delta0", scale.delta0, low=0.0, high=0.5, strict_high=True)
        if "scale.delta" not in problems and "scale.delta0" not in problems:
            delta, delta0 = _tubes_delta(self) if name == ExperimentName.TUBES else (self.delta, self.delta0)
            if delta0 > 0 and delta > delta0:
                problems["scale.delta"] = f"must not exceed delta0 = {delta0}, got {delta}"
        if "scale.R" not in problems:
            for key, values in (("scale.r", [scale.r]), ("scale.r_list", scale.r_list or [])):
                if key not in problems and any(isinstance(v, (int, float)) and v > self.R for v in values if v is not None):
                    problems[key] = f"packet scales must not exceed R = {self.R}"

        if symbol.kind not in [k.value for k in SymbolKind]:
            problems["symbol.kind"] = f"expected one of {[k.value for k in SymbolKind]}, got {symbol.kind!r}"
        elif symbol.kind == SymbolKind.HALFWAVE.value and name != ExperimentName.FLOW:
            problems["symbol.kind"] = "half-wave symbols are only run by the flow experiment"
        if symbol.metric not in [m.value for m in MetricKind]:
            problems["symbol.metric"] = f"expected one of {[m.value for m in MetricKind]}, got {symbol.metric!r}"
        elif symbol.metric == MetricKind.FILE.value and not symbol.metric_path:
            problems["symbol.metric_path"] = "required when symbol.metric = 'file'"
        _number("symbol.eps", symbol.eps, low=0.0, high=1.0, strict_high=True)
        _numbers("symbol.speeds", symbol.speeds, low=0.0, strict_low=True)
        if name == ExperimentName.BUDGET:
            _integer("symbol.dim", symbol.dim, 1)
        elif symbol.dim not in SUPPORTED_DIMENSIONS:
            problems["symbol.dim"] = f"expected one of {SUPPORTED_DIMENSIONS}, got {symbol.dim!r}"
        elif symbol.dim != 1 and name not in (ExperimentName.ISOMETRY, ExperimentName.FLOW, ExperimentName.BUDGET):
            problems["symbol.dim"] = f"experiment '{name.value}' runs in one dimension only"
        if symbol.s_values is not None:
            if not isinstance(symbol.s_values, list) or not symbol.s_values:
                problems["symbol.s_values"] = f"expected a nonempty list, got {symbol.s_values!r}"
            else:
                for index, value in enumerate(symbol.s_values):
                    s = _parse_fraction(value)
                    if s is None or not 0 <= s <= 1:
                        problems[f"symbol.s_values[{index}]"] = f"expected a rational in [0, 1], got {value!r}"
        if symbol.q is not None:
            q = _parse_fraction(symbol.q)
            if q is None or q <= 2:
                problems["symbol.q"] = f"expected a rational > 2, got {symbol.q!r}"

        _integer("grid.samples", grid.samples, 1)
        _integer("grid.steps", grid.steps, MIN_FLOW_STEPS)
        _integer("grid.time_samples", grid.time_samples, 2)
        _integer("seed", self.seed, 0)
        if self.output is not None and not isinstance(self.output, str):
            problems["output"] = f"expected a path, got {self.output!r}"
        if problems:
            raise ConfigError(problems)


def _parse_fraction(value: Any) -> Fraction | None:
    if isinstance(value, bool):
        return None
    try:
        return Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(10 ** 6)
    except (TypeError, ValueError, ZeroDivisionError):
        return None


# Catalog and results


@dataclasses.dataclass(frozen=True)
class CatalogEntry(DataClassJsonMixin):
    name: str
    description: str
    topic: str
    required: list[str]
    optional: list[str]


@dataclasses.dataclass(frozen=True)
class PlotSpec(DataClassJsonMixin):
    table: str
    x: str
    y: str
    group: str | None = None
    logscale: bool = False


@dataclasses.dataclass(frozen=True)
class ExperimentResult(DataClassJsonMixin):
    tables: dict[str, list[dict]]
    summary: dict[str, Any]
    checks: dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


@dataclasses.dataclass(frozen=True, eq=False)
class RunContext:
    config: ExperimentConfig
    metric_data: FourierMetricData | None = None


@dataclasses.dataclass(frozen=True)
class Experiment:
    entry: CatalogEntry
    cells: Callable[[RunContext], list[Callable[[], Any]]]
    aggregate: Callable[[RunContext, list[Any]], ExperimentResult]
    plots: tuple[PlotSpec, ...] = ()


# Shared builders


def _point(dim: int, x: float, xi: float) -> PhasePoint:
    pad = (0.0,) * (dim - 1)
    return PhasePoint(x=(float(x),) + pad, xi=(float(xi),) + pad)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def build_metric(ctx: RunContext, R: float) -> MetricField:
    config = ctx.config
    kind = MetricKind(config.symbol.metric)
    speed = config.speeds[0]
    if kind == MetricKind.CONSTANT:
        return constant_metric(speed * np.eye(config.dim))
    if kind == MetricKind.PERTURBED:
        return perturbed_identity_metric(config.dim, config.eps, R, nu=speed)
    if ctx.metric_data is None:
        raise ParameterError(f"Metric data from {config.symbol.metric_path} was not loaded")
    return metric_from_data(ctx.metric_data, name=config.symbol.metric_path)


def metric_period(ctx: RunContext, R: float) -> float | None:
    """Period the computational box must be a multiple of, None for constant metrics."""
    kind = MetricKind(ctx.config.symbol.metric)
    if kind == MetricKind.PERTURBED:
        return 2 * math.pi * R
    if kind == MetricKind.FILE and ctx.metric_data is not None:
        return 2 * ctx.metric_data.half_width
    return None


def build_symbol(ctx: RunContext, R: float, cutoff: FrequencyCutoff = FrequencyCutoff.NONE) -> MetricSymbol:
    metric = build_metric(ctx, R)
    if SymbolKind(ctx.config.symbol.kind) == SymbolKind.HALFWAVE:
        return make_halfwave(metric)
    return make_schrodinger(metric, cutoff=cutoff)


def free_symbol(dim: int, speed: float = 1.0) -> MetricSymbol:
    return make_schrodinger(constant_metric(speed * np.eye(dim)), cutoff=FrequencyCutoff.NONE)


def box_grid(dim: int, minimum: float, spacing: float, period: float | None = None) -> SpatialGrid:
    half_width = minimum if period is None else commensurate_half_width(minimum, period)
    return SpatialGrid.covering(dim, half_width, spacing * (1 + 1e-9))


# isometry


def _isometry_sample(dim: int, R: float, seed: int, index: int) -> dict:
    psgrid = phase_space_grid_for(R, dim, max_frequency=1.0)
    grid = psgrid.spatial
    rng = _rng(seed, int(R), index)
    inside = np.linalg.norm(grid.frequencies, axis=-1) <= 1.0
    spectrum = np.where(inside, rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape), 0.0)
    f = SpatialField(grid, np.fft.ifftn(spectrum)).normalized()
    transformed = fbi_forward(f, R, psgrid)
    reconstruction = fbi_adjoint(transformed, R)
    ratio = transformed.norm() / f.norm()
    return {
        "R": float(R),
        "sample": index,
        "norm_ratio": ratio,
        "deviation": abs(ratio - 1),
        "reconstruction_error": (reconstruction - f).norm() / f.norm(),
    }


def _isometry_cells(ctx: RunContext) -> list[Callable[[], dict]]:
    config = ctx.config
    R_list = config.scale.R_list or list(ISOMETRY_SCALES)
    count = config.samples(ISOMETRY_SAMPLES)
    return [partial(_isometry_sample, config.dim, float(R), config.seed, i) for R in R_list for i in range(count)]


def _isometry_aggregate(ctx: RunContext, results: list[dict]) -> ExperimentResult:
    deviation = max(r["deviation"] for r in results)
    reconstruction = max(r["reconstruction_error"] for r in results)
    return ExperimentResult(
        tables={"samples": results},
        summary={"max_deviation": deviation, "max_reconstruction_error": reconstruction, "samples": len(results)},
        checks={"isometry": deviation <= ISOMETRY_TOLERANCE, "inversion": reconstruction <= ISOMETRY_TOLERANCE},
    )


# flow


def _closed_form(dim: int, speed: float, T: float) -> list[dict]:
    start = _point(dim, 0.3, 0.7)
    x0, xi0 = start.position, start.frequency
    rows = []
    for kind in SymbolKind:
        metric = constant_metric(speed * np.eye(dim))
        symbol = make_schrodinger(metric, cutoff=FrequencyCutoff.NONE) if kind == SymbolKind.SCHRODINGER else make_halfwave(metric)
        path = integrate_bicharacteristic(symbol, start, (0.0, T), estimate_error=False)
        if kind == SymbolKind.SCHRODINGER:
            x_expected = x0 + 2 * speed * xi0 * T
            psi_expected = speed * float(xi0 @ xi0) * T
        else:
            x_expected = x0 + math.sqrt(speed) * xi0 / np.linalg.norm(xi0) * T
            psi_expected = 0.0
        rows.append({
            "kind": kind.value,
            "T": T,
            "x_error": float(np.linalg.norm(path.x[-1] - x_expected)) / max(1.0, float(np.linalg.norm(x_expected))),
            "xi_error": float(np.linalg.norm(path.xi[-1] - xi0)),
            "psi_error": abs(float(path.psi[-1]) - psi_expected) / max(1.0, abs(psi_expected)),
        })
    return rows


def _richardson_cases(dim: int) -> list[tuple[str, MetricSymbol, PhasePoint]]:
    return [
        ("perturbed", make_schrodinger(perturbed_identity_metric(dim, 0.3, 2.0), cutoff=FrequencyCutoff.NONE), _point(dim, 0.0, 1.0)),
        ("cosine", make_schrodinger(cosine_metric(dim, 1.5, 0.2, 3.0), cutoff=FrequencyCutoff.NONE), _point(dim, 0.5, 0.8)),
        ("halfwave", make_halfwave(cosine_metric(dim, 1.0, 0.25, 2.0)), _point(dim, -1.0, 1.2)),
    ]


def _richardson_case(dim: int, index: int, steps: int) -> dict:
    case, symbol, start = _richardson_cases(dim)[index]
    report = richardson_ratio(symbol, start, RICHARDSON_HORIZON, steps)
    path = integrate_bicharacteristic(symbol, start, (0.0, RICHARDSON_HORIZON), steps=4 * steps, with_variational=True, estimate_error=False)
    defect = symplectic_defect(path.variational)
    return {
        "case": case,
        "steps": steps,
        "coarse_error": report.errors[0],
        "fine_error": report.errors[1],
        "ratio": report.ratio,
        "determinant_defect": defect["determinant"],
        "form_defect": defect["form"],
    }


def _bilipschitz_chunk(ctx: RunContext, R: float, chunk: int, count: int) -> list[dict]:
    config = ctx.config
    symbol = build_symbol(ctx, R)
    rng = _rng(config.seed, chunk)
    pairs = []
    for _ in range(count):
        x = rng.uniform(-4, 4, config.dim) * math.sqrt(R)
        xi = rng.uniform(0.5, 1.0, config.dim) * rng.choice([-1.0, 1.0], config.dim)
        dx = rng.uniform(-1, 1, config.dim) * math.sqrt(R)
        dxi = rng.uniform(-1, 1, config.dim) / math.sqrt(R)
        p1 = PhasePoint(x=x, xi=xi)
        pairs.append((p1, p1.shifted(dx, dxi)))
    report = bilipschitz_report(symbol, pairs, R, R)
    rows = []
    for row, ratios in enumerate(report.ratios):
        over = ratios > report.envelope * (1 + 1e-9)
        rows.append({
            "pair": chunk * BILIPSCHITZ_CHUNK + row,
            "max_ratio": float(np.max(ratios)),
            "min_ratio": float(np.min(ratios)),
            "envelope": float(report.envelope[-1]),
            "c2": report.c2,
            "violations": int(np.sum(over)),
        })
    return rows


def _flow_cells(ctx: RunContext) -> list[Callable[[], Any]]:
    config = ctx.config
    R = config.R
    steps = config.steps(RICHARDSON_STEPS)
    pairs = config.samples(BILIPSCHITZ_PAIRS)
    cells: list[Callable[[], Any]] = [partial(_closed_form, config.dim, config.speeds[0], R)]
    cells += [partial(_richardson_case, config.dim, i, steps) for i in range(len(_richardson_cases(config.dim)))]
    for chunk, start in enumerate(range(0, pairs, BILIPSCHITZ_CHUNK)):
        cells.append(partial(_bilipschitz_chunk, ctx, R, chunk, min(BILIPSCHITZ_CHUNK, pairs - start)))
    return cells


def _flow_aggregate(ctx: RunContext, results: list[Any]) -> ExperimentResult:
    closed = results[0]
    cases = len(_richardson_cases(ctx.config.dim))
    richardson = results[1:1 + cases]
    pairs = [row for chunk in results[1 + cases:] for row in chunk]
    closed_error = max(max(r["x_error"], r["xi_error"], r["psi_error"]) for r in closed)
    lo, hi = RICHARDSON_RANGE
    determinant = max(r["determinant_defect"] for r in richardson)
    violations = sum(r["violations"] for r in pairs)
    return ExperimentResult(
        tables={"closed_form": closed, "richardson": richardson, "bilipschitz": pairs},
        summary={
            "closed_form_error": closed_error,
            "richardson_ratios": {r["case"]: r["ratio"] for r in richardson},
            "max_determinant_defect": determinant,
            "bilipschitz_pairs": len(pairs),
            "bilipschitz_violations": violations,
            "max_distance_ratio": max((r["max_ratio"] for r in pairs), default=math.nan),
        },
        checks={
            "closed_form": closed_error <= CLOSED_FORM_TOLERANCE,
            "fourth_order": all(lo <= r["ratio"] <= hi for r in richardson),
            "symplectic": determinant <= SYMPLECTIC_TOLERANCE,
            "bilipschitz": violations == 0,
        },
    )


# localization


def _localization_scale(ctx: RunContext, r: float) -> dict:
    config = ctx.config
    R = config.R
    symbol = build_symbol(ctx, R, FrequencyCutoff.BALL)
    grid = box_grid(config.dim, r + 10 * r ** 0.6, math.pi / 4, metric_period(ctx, R))
    label = _point(config.dim, 0.0, PACKET_FREQUENCY)
    bichar = integrate_bicharacteristic(symbol, label, (-r, r), start_time=0.0, estimate_error=False, R=R)
    packet = WavePacket(label=label, alpha=1.0, bichar=bichar, r=r)
    t_grid = np.linspace(-r, r, config.time_samples(LOCALIZATION_TIME_SAMPLES))
    report = localization_report(packet, symbol, r, config.delta, t_grid, grid, method=PropagationMethod.EXPONENTIAL)
    logger.info("Localization at r = %g: max tail %.3g, peaks within bin: %s", r, report.max_tail, report.peaks_within_bin)
    trajectory = evolve_packets([packet], symbol, t_grid, grid, method=PropagationMethod.EXPONENTIAL)[0]
    amplitude = amplitude_report(trajectory, packet)
    short = t_grid[np.abs(t_grid) <= math.sqrt(r)]
    defect = parametrix_defect(symbol, packet, short if short.size else [0.0], grid)
    return {
        "tails": [
            dict(row, within_bin=bool(abs(row["tau_peak"] - row["tau_expected"]) <= b))
            for row, b in zip(report.rows(), report.tau_bin)
        ],
        "packet": {
            "r": r,
            "amplitude_constant": amplitude.constant,
            "max_defect": defect.max_defect,
            "defect_times": len(defect.times),
        },
    }


def _localization_cells(ctx: RunContext) -> list[Callable[[], dict]]:
    r_list = ctx.config.scale.r_list or list(LOCALIZATION_SCALES)
    return [partial(_localization_scale, ctx, float(r)) for r in r_list]


def _localization_aggregate(ctx: RunContext, results: list[dict]) -> ExperimentResult:
    rows = [row for result in results for row in result["tails"]]
    packets = [result["packet"] for result in results]
    tail = max(max(row["spatial_tail"], row["frequency_tail"], row["time_frequency_tail"]) for row in rows)
    return ExperimentResult(
        tables={"tails": rows, "packets": packets},
        summary={
            "max_tail": tail,
            "samples": len(rows),
            "peaks_within_bin": all(row["within_bin"] for row in rows),
            "amplitude_constant": max(p["amplitude_constant"] for p in packets),
            "parametrix_defects": {f"{p['r']:g}": p["max_defect"] for p in packets},
        },
        checks={"tails": tail <= LOCALIZATION_TOLERANCE, "time_frequency_peak": all(row["within_bin"] for row in rows)},
    )


# decompose


def _decompose_run(ctx: RunContext) -> dict:
    config = ctx.config
    R = config.R
    r = float(config.scale.r if config.scale.r is not None else R)
    symbol = build_symbol(ctx, R, FrequencyCutoff.BALL)
    grid = box_grid(config.dim, 2 * r + 16 * math.sqrt(r), math.pi / 4, metric_period(ctx, R))
    xi_center = _point(config.dim, 0.0, PACKET_FREQUENCY).frequency
    region = PhaseSpaceRegion(
        x_center=(0.0,) * config.dim, x_radius=2 * math.sqrt(r), xi_center=tuple(xi_center), xi_radius=0.25,
    )
    rng = _rng(config.seed, 4)
    raw = grid.zeros()
    for _ in range(4):
        x0 = rng.uniform(-1, 1, config.dim) * math.sqrt(r)
        xi0 = xi_center + rng.uniform(-0.15, 0.15, config.dim)
        raw = raw + coherent_state(x0, xi0, r, grid) * complex(rng.normal(), rng.normal())
    u0 = localize(raw, region, r)
    times = np.linspace(-r, r, config.time_samples(DEFAULT_TIME_SAMPLES))
    decomposition = wavepacket_decompose(u0, symbol, r, region, times, method=PropagationMethod.EXPONENTIAL)
    norm = decomposition.input_norm
    remainder = [
        {"t": float(t), "remainder_l2": float(g), "relative": float(g) / norm, "remainder_sup": float(s)}
        for t, g, s in zip(times, decomposition.remainder_l2, decomposition.remainder_sup)
    ]
    packets = [
        {"x": p.label.x[0], "xi": p.label.xi[0], "alpha": p.alpha}
        for p in sorted(decomposition.packets, key=lambda p: -p.alpha)
    ]
    return {
        "remainder": remainder,
        "packets": packets,
        "lattice_size": decomposition.lattice_size,
        "frame_ratio": decomposition.frame_ratio,
        "input_norm": norm,
    }


def _decompose_cells(ctx: RunContext) -> list[Callable[[], dict]]:
    return [partial(_decompose_run, ctx)]


def _decompose_aggregate(ctx: RunContext, results: list[dict]) -> ExperimentResult:
    run = results[0]
    relative = max(row["relative"] for row in run["remainder"])
    return ExperimentResult(
        tables={"remainder": run["remainder"], "packets": run["packets"]},
        summary={
            "max_relative_remainder": relative,
            "packets": len(run["packets"]),
            "lattice_size": run["lattice_size"],
            "frame_ratio": run["frame_ratio"],
        },
        checks={"remainder": relative <= REMAINDER_TOLERANCE, "frame": run["frame_ratio"] <= 1 + FRAME_TOLERANCE},
    )


# dispersive


def _dispersive_case(ctx: RunContext, case: str) -> dict:
    config = ctx.config
    R = config.R
    minimum = DISPERSIVE_BOX_FACTOR * R
    if case == "free":
        symbol, grid = free_symbol(1), box_grid(1, minimum, DISPERSIVE_SPACING)
    else:
        symbol, grid = build_symbol(ctx, R), box_grid(1, minimum, DISPERSIVE_SPACING, metric_period(ctx, R))
    u0 = coherent_state(0.0, 0.0, DISPERSIVE_DATA_SCALE, grid)
    times = [0.0] + [float(2 ** k) for k in range(int(math.floor(math.log2(R))) + 1)]
    report = dispersive_fit(symbol, u0, times, method=PropagationMethod.EXPONENTIAL)
    return {
        "rows": [dict(row, case=case) for row in report.rows()],
        "fit": {"case": case, "slope": report.slope, "ci_low": report.fit.ci95[0], "ci_high": report.fit.ci95[1], "points": report.fit.points},
    }


def _dispersive_cells(ctx: RunContext) -> list[Callable[[], dict]]:
    return [partial(_dispersive_case, ctx, case) for case in ("free", "variable")]


def _dispersive_aggregate(ctx: RunContext, results: list[dict]) -> ExperimentResult:
    fits = {r["fit"]["case"]: r["fit"]["slope"] for r in results}
    expected = -ctx.config.dim / 2
    return ExperimentResult(
        tables={"decay": [row for r in results for row in r["rows"]], "fits": [r["fit"] for r in results]},
        summary={"slopes": fits, "expected_slope": expected},
        checks={
            "free": abs(fits["free"] - expected) <= FREE_DISPERSIVE_TOLERANCE,
            "variable": abs(fits["variable"] - expected) <= DISPERSIVE_TOLERANCE,
        },
    )


# bilinear


def _bilinear_p(dim: int) -> float:
    return (dim + 3) / (dim + 1)


def _bilinear_cell(ctx: RunContext, R: float, nu: float) -> dict:
    c1, c2 = ctx.config.speeds[:2]
    norm = bilinear_cell(free_symbol(1, c1), free_symbol(1, c2), R, nu, _bilinear_p(1))
    logger.debug("Bilinear cell R = %g, nu = %g: %.6g", R, nu, norm)
    return {"R": R, "nu": nu, "norm": norm}


def _bilinear_lists(config: ExperimentConfig) -> tuple[list[float], list[float]]:
    R_list = [float(v) for v in (config.scale.R_list or BILINEAR_SCALES)]
    nu_list = [float(v) for v in (config.scale.nu_list or NU_SWEEP)]
    return R_list, nu_list


def _bilinear_cells(ctx: RunContext) -> list[Callable[[], dict]]:
    R_list, nu_list = _bilinear_lists(ctx.config)
    return [partial(_bilinear_cell, ctx, R, nu) for R in R_list for nu in nu_list]


def _bilinear_aggregate(ctx: RunContext, results: list[dict]) -> ExperimentResult:
    R_list, nu_list = _bilinear_lists(ctx.config)
    sweep = assemble_bilinear_sweep(_bilinear_p(1), R_list, nu_list, {(r["R"], r["nu"]): r["norm"] for r in results})
    fits = [
        {"axis": axis, "fixed": key, "slope": fit.slope, "ci_low": fit.ci95[0], "ci_high": fit.ci95[1], "prefactor": fit.prefactor}
        for axis, table in (("nu", sweep.nu_fits), ("R", sweep.r_fits))
        for key, fit in table.items()
    ]
    return ExperimentResult(
        tables={"cells": sweep.rows(), "fits": fits},
        summary={"p": sweep.p, "nu_slope": sweep.nu_slope, "r_slope": sweep.r_slope},
        checks={
            "nu_exponent": abs(sweep.nu_slope + 0.5) <= BILINEAR_NU_TOLERANCE,
            "R_exponent": sweep.r_slope <= BILINEAR_R_SLOPE_MAX,
        },
    )


# conservation


def _conservation_member(ctx: RunContext, index: int) -> dict:
    config = ctx.config
    R = config.R
    rng = _rng(config.seed, index)
    while True:
        xi1, xi2 = rng.uniform(-CONSERVATION_FREQUENCY, CONSERVATION_FREQUENCY, 2)
        if abs(xi1 - xi2) >= 0.1:
            break
    mismatch = rng.choice([-1.0, 1.0]) * rng.uniform(*CONSERVATION_MISMATCH)
    symbol = free_symbol(1, config.speeds[0])
    top = max(abs(xi1), abs(xi2), abs(xi2 + mismatch))
    grid = box_grid(1, 2 * R, math.pi / (2 * (top + WINDOW_WIDTHS / math.sqrt(R))))
    span = (-R / 2, R / 2)
    packets = {}
    for key, xi in (("a", xi1), ("b", xi2), ("c", xi2 + mismatch)):
        label = PhasePoint(x=(0.0,), xi=(float(xi),))
        bichar = integrate_bicharacteristic(symbol, label, span, start_time=0.0, estimate_error=False, R=R)
        packets[key] = WavePacket(label=label, alpha=1.0, bichar=bichar, r=R)
    times = np.linspace(*span, int(round(R / TIME_FREQUENCY_STEP)) + 1)
    keys = list(packets)
    trajectories = dict(zip(keys, evolve_packets([packets[k] for k in keys], symbol, times, grid, method=PropagationMethod.EXPONENTIAL)))
    cube = SpaceTimeCube(x_center=(0.0,), t_center=0.0, side=R)
    weight = cube_weight(cube, grid, times)
    params = ScaleParams(R=R, delta=config.delta, delta0=config.delta0)
    conserving, violating = ("a", "b", "b", "a"), ("a", "c", "b", "a")
    values = {}
    for name, quad in (("conserving", conserving), ("violating", violating)):
        integral = quadrilinear_integral([trajectories[k] for k in quad], cube, weight)
        flags = conservation_flags([packets[k] for k in quad], cube, params, symbol, symbol)
        values[name] = (abs(integral), flags.all_ok)
    return {
        "member": index,
        "xi1": float(xi1),
        "xi2": float(xi2),
        "mismatch": float(mismatch),
        "conserving_abs": values["conserving"][0],
        "violating_abs": values["violating"][0],
        "ratio": values["conserving"][0] / values["violating"][0] if values["violating"][0] > 0 else math.inf,
        "conserving_flags": values["conserving"][1],
        "violating_flags": values["violating"][1],
    }


def _conservation_cells(ctx: RunContext) -> list[Callable[[], dict]]:
    return [partial(_conservation_member, ctx, i) for i in range(ctx.config.samples(CONSERVATION_QUADRUPLES))]


def _conservation_aggregate(ctx: RunContext, results: list[dict]) -> ExperimentResult:
    median = float(np.median([r["ratio"] for r in results]))
    return ExperimentResult(
        tables={"ensemble": results},
        summary={"median_ratio": median, "members": len(results)},
        checks={
            "discrimination": median >= CONSERVATION_RATIO_MIN,
            "conserving_flags": all(r["conserving_flags"] for r in results),
            "violating_flags": not any(r["violating_flags"] for r in results),
        },
    )


# tubes


def _tubes_delta(config: ExperimentConfig) -> tuple[float, float]:
    delta = TUBES_DELTA if config.scale.delta is None else float(config.scale.delta)
    delta0 = max(delta, TUBES_DELTA) if config.scale.delta0 is None else float(config.scale.delta0)
    return delta, delta0


def _tubes_grid(config: ExperimentConfig) -> CubeGrid:
    delta, _ = _tubes_delta(config)
    R = config.R
    return CubeGrid(dim=1, R=R, delta=delta, x_center=(-3 * R / 16,), t_center=0.0)


def _double_end(ctx: RunContext, nu: float) -> dict:
    """Shell tubes through an anchor cell against a slow tube at the origin, at separation nu."""
    config = ctx.config
    R = config.R
    delta, delta0 = _tubes_delta(config)
    grid = _tubes_grid(config)
    params = ScaleParams(R=R, nu=nu, delta=delta, delta0=delta0)
    symbol = free_symbol(1)
    radius = math.sqrt(R) / 4
    t_q = -R / 2 + math.sqrt(R) / 2
    gap = R ** (1 - delta) + math.sqrt(R) / 2 + 1.05 * (math.sqrt(R) + radius) / params.nu
    x_q = -params.nu * gap
    q = grid.locate((x_q, t_q))
    xi1 = params.nu / 2 + 1 / (2 * math.sqrt(R))
    lattice = np.arange(-2 * math.sqrt(R), 2 * math.sqrt(R) + 1)[:, None] / math.sqrt(R)
    shell = energy_shell_sample(symbol, symbol, ((x_q,), t_q), (xi1,), (0.0,), 2 * xi1 * 0.75 / math.sqrt(R), lattice)
    span = (-R / 2, R / 2)
    shell_tubes = [
        tube_from_bichar(
            integrate_bicharacteristic(symbol, PhasePoint(x=(x_q,), xi=tuple(eta)), span, start_time=t_q, estimate_error=False, R=R),
            R, TubeFamily.FIRST, delta, radius,
        )
        for eta in shell.points
    ]
    slow = integrate_bicharacteristic(symbol, PhasePoint(x=(0.0,), xi=(0.0,)), span, start_time=0.0, estimate_error=False, R=R)
    count = double_end_count(q, shell_tubes, tube_from_bichar(slow, R, TubeFamily.SECOND, delta, radius), grid, params)
    return {"nu": params.nu, "shell_tubes": len(shell_tubes), "count": count}


def _buckets(ctx: RunContext) -> dict:
    config = ctx.config
    R = config.R
    delta, _ = _tubes_delta(config)
    grid = _tubes_grid(config)
    symbol = free_symbol(1)
    rng = _rng(config.seed, 7)
    span = (-R / 2, R / 2)
    center = grid.x_center[0]
    tubes = []
    for family, (lo, hi) in ((TubeFamily.FIRST, (0.3, 0.5)), (TubeFamily.SECOND, (-0.5, -0.3))):
        for _ in range(TUBES_FAMILY_SIZE):
            label = PhasePoint(x=(center + rng.uniform(-R / 4, R / 4),), xi=(rng.uniform(lo, hi),))
            bichar = integrate_bicharacteristic(symbol, label, span, start_time=0.0, estimate_error=False, R=R)
            tubes.append(tube_from_bichar(bichar, R, family, delta))
    incidence = incidences(TubeSet(tubes), grid)
    buckets = pigeonhole_buckets(incidence)
    relation = focusing_relation(buckets, grid)
    return {
        "cells": buckets.cell_rows(),
        "tubes": buckets.tube_rows(),
        "incident_cells": len(incidence.cell_tubes),
        "unpaired_cells": len(buckets.unpaired),
        "partition": buckets.cell_total() + len(buckets.unpaired) == len(incidence.cell_tubes),
        "max_related": relation.max_related(),
        "bound_holds": relation.bound_holds(),
        "symmetric": incidence.is_symmetric(),
    }


def _tubes_cells(ctx: RunContext) -> list[Callable[[], dict]]:
    nu_list = [float(v) for v in (ctx.config.scale.nu_list or NU_SWEEP)]
    return [partial(_double_end, ctx, nu) for nu in nu_list] + [partial(_buckets, ctx)]


def _tubes_aggregate(ctx: RunContext, results: list[dict]) -> ExperimentResult:
    sweeps, buckets = results[:-1], results[-1]
    reference = max(sweeps, key=lambda r: r["nu"])
    base = reference["count"].time_extent * reference["nu"]
    extent_rows, cell_rows = [], []
    for result in sweeps:
        count = result["count"]
        normalized = count.time_extent * result["nu"] / base if base > 0 else math.nan
        extent_rows.append({
            "nu": result["nu"],
            "shell_tubes": result["shell_tubes"],
            "cells": count.total,
            "max_per_cell": count.max_per_cell,
            "time_extent": count.time_extent,
            "predicted_extent": count.predicted_extent,
            "normalized_extent": normalized,
        })
        cell_rows += [{"nu": result["nu"], "cell": cell, "shell_tubes": n} for cell, n in count.per_cell.items()]
    lo, hi = 1 / EXTENT_FACTOR, EXTENT_FACTOR
    return ExperimentResult(
        tables={"extent": extent_rows, "double_end": cell_rows, "bucket_cells": buckets["cells"], "bucket_tubes": buckets["tubes"]},
        summary={
            "max_per_cell": max(r["max_per_cell"] for r in extent_rows),
            "normalized_extents": {f"{r['nu']:g}": r["normalized_extent"] for r in extent_rows},
            "incident_cells": buckets["incident_cells"],
            "unpaired_cells": buckets["unpaired_cells"],
            "max_related": buckets["max_related"],
        },
        checks={
            "per_cell": all(0 < r["max_per_cell"] <= 2 for r in extent_rows),
            "extent_scaling": all(lo <= r["normalized_extent"] <= hi for r in extent_rows),
            "focusing_bound": buckets["bound_holds"],
            "incidence_symmetric": buckets["symmetric"],
            "bucket_partition": buckets["partition"],
        },
    )


# budget


def _budget_run(ctx: RunContext) -> list:
    config = ctx.config
    return strichartz_bookkeeping(config.symbol.s_values or list(BUDGET_S_VALUES), config.dim, config.symbol.q)


def _budget_cells(ctx: RunContext) -> list[Callable[[], list]]:
    return [partial(_budget_run, ctx)]


def _budget_aggregate(ctx: RunContext, results: list[list]) -> ExperimentResult:
    budgets = results[0]
    exact = True
    values = {}
    for budget in budgets:
        s, d, q = budget.s, budget.d, budget.q
        sigma = Fraction(2) / (3 + s)
        exact &= budget.sigma == sigma
        exact &= budget.kappa1 == (1 - s) / (2 * (3 + s))
        exact &= budget.kappa == sigma - Fraction(1, 2)
        if q is not None:
            exact &= budget.kappa0 == Fraction(d - 1, 2) - d / q
        values[str(s)] = {
            "sigma": float(budget.sigma),
            "kappa1": float(budget.kappa1),
            "kappa": float(budget.kappa),
            "kappa0": None if budget.kappa0 is None else float(budget.kappa0),
        }
    summary: dict[str, Any] = {"budgets": values}
    if len(values) == 1:
        summary.update(next(iter(values.values())))
    return ExperimentResult(tables={"budget": budget_rows(budgets)}, summary=summary, checks={"exact": bool(exact)})


EXPERIMENTS: dict[ExperimentName, Experiment] = {
    ExperimentName.ISOMETRY: Experiment(
        CatalogEntry(
            "isometry", "Phase-space transform isometry and inversion on random band-limited data",
            "phase-space transform", ["experiment"], ["scale.R_list", "grid.samples", "symbol.dim", "seed"],
        ),
        _isometry_cells, _isometry_aggregate,
        (PlotSpec("samples", "R", "deviation", logscale=True),),
    ),
    ExperimentName.FLOW: Experiment(
        CatalogEntry(
            "flow", "Bicharacteristic closed forms, 4th-order convergence, symplecticity and the bi-Lipschitz envelope",
            "Hamiltonian flow", ["experiment"], ["scale.R", "symbol.kind", "symbol.metric", "symbol.eps", "symbol.speeds", "grid.steps", "grid.samples", "seed"],
        ),
        _flow_cells, _flow_aggregate,
        (PlotSpec("bilipschitz", "pair", "max_ratio"),),
    ),
    ExperimentName.LOCALIZATION: Experiment(
        CatalogEntry(
            "localization", "Position, frequency and time-frequency tails of evolved packets",
            "wave packet localization", ["experiment"], ["scale.R", "scale.r_list", "scale.delta", "symbol.metric", "symbol.eps", "grid.time_samples"],
        ),
        _localization_cells, _localization_aggregate,
        (PlotSpec("tails", "t", "spatial_tail", group="r", logscale=True),),
    ),
    ExperimentName.DECOMPOSE: Experiment(
        CatalogEntry(
            "decompose", "Wave packet decomposition of localized data and its remainder over [-r, r]",
            "wave packet decomposition", ["experiment"], ["scale.R", "scale.r", "symbol.metric", "symbol.eps", "grid.time_samples", "seed"],
        ),
        _decompose_cells, _decompose_aggregate,
        (PlotSpec("remainder", "t", "relative", logscale=True),),
    ),
    ExperimentName.DISPERSIVE: Experiment(
        CatalogEntry(
            "dispersive", "Sup-norm decay slope of free and variable-metric Schrodinger evolutions",
            "dispersive decay", ["experiment"], ["scale.R", "symbol.metric", "symbol.eps", "symbol.speeds"],
        ),
        _dispersive_cells, _dispersive_aggregate,
        (PlotSpec("decay", "t", "sup_over_l1", group="case", logscale=True),),
    ),
    ExperimentName.BILINEAR: Experiment(
        CatalogEntry(
            "bilinear", "Bilinear space-time norm of transverse packets over an (R, nu) sweep",
            "bilinear estimate", ["experiment"], ["scale.R_list", "scale.nu_list", "symbol.speeds"],
        ),
        _bilinear_cells, _bilinear_aggregate,
        (PlotSpec("cells", "nu", "norm", group="R", logscale=True),),
    ),
    ExperimentName.CONSERVATION: Experiment(
        CatalogEntry(
            "conservation", "Quadrilinear packet integrals for conserving against violating quadruples",
            "conservation laws", ["experiment"], ["scale.R", "scale.delta", "scale.delta0", "symbol.speeds", "grid.samples", "seed"],
        ),
        _conservation_cells, _conservation_aggregate,
        (PlotSpec("ensemble", "member", "ratio", logscale=True),),
    ),
    ExperimentName.TUBES: Experiment(
        CatalogEntry(
            "tubes", "Double-ended shell tube counting and pigeonholed focusing buckets",
            "tube incidence counting", ["experiment"], ["scale.R", "scale.nu_list", "scale.delta", "scale.delta0", "seed"],
        ),
        _tubes_cells, _tubes_aggregate,
        (PlotSpec("extent", "nu", "time_extent", logscale=True),),
    ),
    ExperimentName.BUDGET: Experiment(
        CatalogEntry(
            "budget", "Exact exponent bookkeeping for the Strichartz loss",
            "Strichartz loss budget", ["experiment"], ["symbol.s_values", "symbol.dim", "symbol.q"],
        ),
        _budget_cells, _budget_aggregate,
    ),
}


def list_experiments() -> list[CatalogEntry]:
    return [EXPERIMENTS[name].entry for name in ExperimentName]


def get_experiment(name: ExperimentName | str) -> Experiment:
    return EXPERIMENTS[ExperimentName(name)]
