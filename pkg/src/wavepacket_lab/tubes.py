import dataclasses
import enum
import itertools
import logging
import math
from collections import defaultdict
from concurrent.futures import Executor
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
from dataclasses_json import DataClassJsonMixin

from .consts import DEFAULT_DELTA, TUBE_SAMPLES_PER_CELL, DYADIC_EXPONENT_PER_DIM, SUPPORTED_DIMENSIONS
from .errors import ParameterError, ResolutionError
from .flow import Bicharacteristic
from .phase_space import PhasePoint, ScaleParams
from .utils import array_field, dyadic_floor

logger = logging.getLogger(__name__)

Cell = tuple[int, ...]


class TubeFamily(str, enum.Enum):
    FIRST = "T1"
    SECOND = "T2"


@dataclasses.dataclass(frozen=True)
class CubeGrid(DataClassJsonMixin):
    """
    The cube Q_R of side R centered at (x_center, t_center), tiled by fine cells of side R^(1/2) and coarse
    cells of side R^(1-delta). Cell indices run over the axes (x_1, ..., x_d, t).
    """
    dim: int
    R: float
    delta: float = DEFAULT_DELTA
    x_center: tuple[float, ...] | None = None
    t_center: float = 0.0

    def __post_init__(self):
        if self.dim not in SUPPORTED_DIMENSIONS:
            raise ParameterError(f"Unsupported dimension: {self.dim}")
        if self.R < 1:
            raise ParameterError(f"Cube scale R must be >= 1, got {self.R}")
        if not 0 < self.delta < 0.5:
            raise ParameterError(f"delta must lie in (0, 1/2), got {self.delta}")
        center = (0.0,) * self.dim if self.x_center is None else tuple(float(v) for v in np.atleast_1d(self.x_center))
        if len(center) != self.dim:
            raise ParameterError(f"Cube center of dimension {len(center)} for dim = {self.dim}")
        object.__setattr__(self, "x_center", center)

    @property
    def side(self) -> float:
        return float(self.R)

    @property
    def cell_side(self) -> float:
        return math.sqrt(self.R)

    @property
    def coarse_side(self) -> float:
        return self.R ** (1 - self.delta)

    @property
    def cells_per_axis(self) -> int:
        return max(1, math.ceil(self.side / self.cell_side - 1e-9))

    @property
    def coarse_per_axis(self) -> int:
        return max(1, math.ceil(self.side / self.coarse_side - 1e-9))

    @property
    def circumradius(self) -> float:
        return self.cell_side * math.sqrt(self.dim + 1) / 2

    @cached_property
    def origin(self) -> np.ndarray:
        return np.asarray(self.x_center + (self.t_center,)) - self.side / 2

    def cells(self) -> Iterator[Cell]:
        return itertools.product(range(self.cells_per_axis), repeat=self.dim + 1)

    @cached_property
    def cell_array(self) -> np.ndarray:
        """Every cell index in lexicographic order, shape (cell count, d + 1)."""
        return np.asarray(list(self.cells()), dtype=int).reshape(-1, self.dim + 1)

    def cell_center(self, cell: Cell) -> np.ndarray:
        return self.origin + (np.asarray(cell) + 0.5) * self.cell_side

    def locate(self, point: Sequence[float]) -> Cell:
        """Cell holding the space-time point (x_1, ..., x_d, t)."""
        index = np.floor((np.asarray(point, dtype=float) - self.origin) / self.cell_side).astype(int)
        if len(index) != self.dim + 1 or np.any(index < 0) or np.any(index >= self.cells_per_axis):
            raise ParameterError(f"Point {tuple(point)} lies outside the cube")
        return tuple(int(v) for v in index)

    def coarse_of(self, cell: Cell) -> Cell:
        position = (self.cell_center(cell) - self.origin) / self.coarse_side
        return tuple(int(min(max(math.floor(v), 0), self.coarse_per_axis - 1)) for v in position)

    def coarse_neighbors(self, coarse: Cell) -> list[Cell]:
        """The coarse cell and its neighbors inside the grid, at most 3^(d+1) of them."""
        ranges = [range(max(c - 1, 0), min(c + 1, self.coarse_per_axis - 1) + 1) for c in coarse]
        return list(itertools.product(*ranges))

    def cell_distance(self, a: Cell, b: Cell) -> float:
        return float(np.linalg.norm(self.cell_center(a) - self.cell_center(b)))


@dataclasses.dataclass(frozen=True, eq=False)
class Tube(DataClassJsonMixin):
    """Core samples (times, x) of a bicharacteristic, dilated by `radius` in space-time."""
    times: np.ndarray = array_field()
    x: np.ndarray = array_field()
    radius: float = 1.0
    family: TubeFamily = TubeFamily.FIRST
    label: PhasePoint | None = None
    bichar: Bicharacteristic | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        x = np.asarray(self.x, dtype=float).reshape(len(times), -1)
        if self.radius <= 0:
            raise ParameterError(f"Tube radius must be positive, got {self.radius}")
        if len(times) < 2 or np.any(np.diff(times) <= 0):
            raise ParameterError("Tube core needs at least two increasing time samples")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "family", TubeFamily(self.family))

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def points(self) -> np.ndarray:
        """Space-time core samples (x_1, ..., x_d, t)."""
        return np.column_stack([self.x, self.times])

    @property
    def max_gap(self) -> float:
        return float(np.max(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


def tube_from_bichar(
        bichar: Bicharacteristic,
        R: float,
        family: TubeFamily | str = TubeFamily.FIRST,
        delta: float = DEFAULT_DELTA,
        radius: float | None = None,
        t_range: tuple[float, float] | None = None,
) -> Tube:
    """Tube of radius R^(1/2+delta) (unless given) around the bicharacteristic, sampled finely enough for incidences."""
    lo, hi = bichar.span if t_range is None else t_range
    bichar.check_time([lo, hi])
    speed = float(np.max(np.linalg.norm(bichar.velocities, axis=-1))) if len(bichar.velocities) else 0.0
    spacing = math.sqrt(R) / (2 * TUBE_SAMPLES_PER_CELL)
    count = max(2, math.ceil((hi - lo) * math.sqrt(1 + speed ** 2) / spacing) + 1)
    times = np.linspace(lo, hi, count)
    x, _, _ = bichar.state_at(times)
    label_time = min(max(0.0, bichar.span[0]), bichar.span[1])
    return Tube(
        times=times,
        x=x,
        radius=R ** (0.5 + delta) if radius is None else radius,
        family=TubeFamily(family),
        label=bichar.point_at(label_time),
        bichar=bichar,
    )


@dataclasses.dataclass(frozen=True)
class TubeSet:
    tubes: tuple[Tube, ...]

    def __post_init__(self):
        object.__setattr__(self, "tubes", tuple(self.tubes))

    def __len__(self) -> int:
        return len(self.tubes)

    def __iter__(self) -> Iterator[Tube]:
        return iter(self.tubes)

    def __getitem__(self, index: int) -> Tube:
        return self.tubes[index]

    def family_indices(self, family: TubeFamily | str) -> list[int]:
        family = TubeFamily(family)
        return [i for i, tube in enumerate(self.tubes) if tube.family == family]

    def family(self, family: TubeFamily | str) -> 'TubeSet':
        return TubeSet(tuple(self.tubes[i] for i in self.family_indices(family)))


@dataclasses.dataclass(frozen=True, eq=False)
class Incidence:
    grid: CubeGrid
    tubes: TubeSet
    tube_cells: tuple[tuple[Cell, ...], ...]
    cell_tubes: dict[Cell, tuple[int, ...]]

    def cells_of(self, tube: int) -> tuple[Cell, ...]:
        return self.tube_cells[tube]

    def tubes_of(self, cell: Cell) -> tuple[int, ...]:
        return self.cell_tubes.get(tuple(cell), ())

    def counts(self, cell: Cell) -> tuple[int, int]:
        members = self.tubes_of(cell)
        first = sum(1 for i in members if self.tubes[i].family == TubeFamily.FIRST)
        return first, len(members) - first

    def is_symmetric(self) -> bool:
        forward = {(i, c) for i, cells in enumerate(self.tube_cells) for c in cells}
        backward = {(i, c) for c, members in self.cell_tubes.items() for i in members}
        return forward == backward

    def rows(self) -> list[dict]:
        rows = []
        for cell in sorted(self.cell_tubes):
            first, second = self.counts(cell)
            rows.append({"cell": "-".join(map(str, cell)), "T1": first, "T2": second})
        return rows


def _incident_cells(tube: Tube, grid: CubeGrid, chunk: int = 256) -> tuple[Cell, ...]:
    """Cells whose closed box lies within radius + half the largest sample gap of some core sample."""
    limit = grid.cell_side / TUBE_SAMPLES_PER_CELL
    if tube.max_gap > limit * (1 + 1e-9):
        raise ResolutionError(f"Tube core sampled with gaps up to {tube.max_gap:.4g}, need <= {limit:.4g}")
    reach = tube.radius + tube.max_gap / 2
    lower = grid.origin + grid.cell_array * grid.cell_side
    upper = lower + grid.cell_side
    hit = np.zeros(len(lower), dtype=bool)
    points = tube.points
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk, None, :]
        gap = np.maximum(np.maximum(lower[None] - p, p - upper[None]), 0.0)
        hit |= np.any(np.linalg.norm(gap, axis=-1) <= reach, axis=0)
    return tuple(tuple(int(v) for v in c) for c in grid.cell_array[hit])


def incidences(tubes: TubeSet | Sequence[Tube], grid: CubeGrid, executor: Executor | None = None) -> Incidence:
    tubes = tubes if isinstance(tubes, TubeSet) else TubeSet(tuple(tubes))
    for tube in tubes:
        if tube.dim != grid.dim:
            raise ParameterError(f"{tube.dim}-dimensional tube in a {grid.dim}-dimensional cube grid")
    if executor is None:
        tube_cells = [_incident_cells(t, grid) for t in tubes]
    else:
        tube_cells = list(executor.map(lambda t: _incident_cells(t, grid), tubes))
    cell_tubes = defaultdict(list)
    for i, cells in enumerate(tube_cells):
        for cell in cells:
            cell_tubes[cell].append(i)
    logger.debug("Incidences: %d tubes, %d incident cells", len(tubes), len(cell_tubes))
    return Incidence(
        grid=grid,
        tubes=tubes,
        tube_cells=tuple(tube_cells),
        cell_tubes={c: tuple(m) for c, m in sorted(cell_tubes.items())},
    )


def dyadic_triple_bound(R: float, dim: int) -> float:
    return (DYADIC_EXPONENT_PER_DIM * dim * math.log2(R)) ** 3


@dataclasses.dataclass(frozen=True, eq=False)
class Buckets:
    """
    cells[(mu1, mu2)]: incident cells met by ~mu1 first-family and ~mu2 second-family tubes.
    tubes[(lambda1, mu1, mu2)]: first-family tubes meeting ~lambda1 cells of the (mu1, mu2) bucket.
    unpaired: incident cells missed by one of the families, kept out of every bucket.
    """
    incidence: Incidence
    cells: dict[tuple[int, int], tuple[Cell, ...]]
    tubes: dict[tuple[int, int, int], tuple[int, ...]]
    unpaired: tuple[Cell, ...] = ()

    @property
    def triples(self) -> list[tuple[int, int, int]]:
        return sorted(self.tubes)

    def cell_total(self) -> int:
        return sum(len(v) for v in self.cells.values())

    def panel_tube_total(self, mu1: int, mu2: int) -> int:
        return sum(len(v) for (_, m1, m2), v in self.tubes.items() if (m1, m2) == (mu1, mu2))

    def triple_bound(self) -> float:
        grid = self.incidence.grid
        return dyadic_triple_bound(grid.R, grid.dim)

    def cell_rows(self) -> list[dict]:
        return [{"mu1": m1, "mu2": m2, "cells": len(v)} for (m1, m2), v in sorted(self.cells.items())]

    def tube_rows(self) -> list[dict]:
        return [{"lambda1": l1, "mu1": m1, "mu2": m2, "tubes": len(v)} for (l1, m1, m2), v in sorted(self.tubes.items())]


def pigeonhole_buckets(incidence: Incidence) -> Buckets:
    cells, unpaired = defaultdict(list), []
    for cell in incidence.cell_tubes:
        first, second = incidence.counts(cell)
        if first == 0 or second == 0:
            unpaired.append(cell)
            continue
        cells[(dyadic_floor(first), dyadic_floor(second))].append(cell)

    tubes = defaultdict(list)
    first_family = incidence.tubes.family_indices(TubeFamily.FIRST)
    for key, members in sorted(cells.items()):
        bucket = set(members)
        for i in first_family:
            hits = sum(1 for c in incidence.cells_of(i) if c in bucket)
            if hits > 0:
                tubes[(dyadic_floor(hits),) + key].append(i)
    return Buckets(
        incidence=incidence,
        cells={k: tuple(v) for k, v in sorted(cells.items())},
        tubes={k: tuple(v) for k, v in sorted(tubes.items())},
        unpaired=tuple(unpaired),
    )


@dataclasses.dataclass(frozen=True, eq=False)
class FocusingRelation:
    relation: dict[int, tuple[Cell, ...]]
    maximizers: dict[tuple[int, tuple[int, int, int]], Cell]
    triple_counts: dict[int, int]
    dim: int

    def related(self, tube: int) -> tuple[Cell, ...]:
        return self.relation.get(tube, ())

    def max_related(self) -> int:
        return max((len(v) for v in self.relation.values()), default=0)

    def bound_holds(self) -> bool:
        """#{S : T ~ S} <= 3^(d+1) times the number of dyadic triples T belongs to."""
        return all(len(cells) <= 3 ** (self.dim + 1) * self.triple_counts[t] for t, cells in self.relation.items())


def focusing_relation(buckets: Buckets, grid: CubeGrid) -> FocusingRelation:
    """
    For every triple, each tube relates to the coarse cell holding most of its hits on bucket cells
    (ties go to the smallest coarse index) together with that cell's neighbors.
    """
    incidence = buckets.incidence
    relation = defaultdict(set)
    maximizers, triple_counts = {}, defaultdict(int)
    for triple, members in buckets.tubes.items():
        bucket = set(buckets.cells[triple[1:]])
        for i in members:
            per_coarse = defaultdict(int)
            for cell in incidence.cells_of(i):
                if cell in bucket:
                    per_coarse[grid.coarse_of(cell)] += 1
            best = min(per_coarse, key=lambda s: (-per_coarse[s], s))
            maximizers[(i, triple)] = best
            triple_counts[i] += 1
            relation[i].update(grid.coarse_neighbors(best))
    return FocusingRelation(
        relation={i: tuple(sorted(cells)) for i, cells in sorted(relation.items())},
        maximizers=maximizers,
        triple_counts=dict(triple_counts),
        dim=grid.dim,
    )


@dataclasses.dataclass(frozen=True)
class DoubleEndCount(DataClassJsonMixin):
    anchor: tuple[int, ...]
    per_cell: dict[str, int]
    total: int
    max_per_cell: int
    time_extent: float
    predicted_extent: float


def double_end_count(
        q: Cell,
        shell_tubes: Sequence[Tube],
        T2: Tube,
        grid: CubeGrid,
        params: ScaleParams,
) -> DoubleEndCount:
    """
    Cells q' at distance >= R^(1-delta) from q that meet T2 and some shell tube through q, with the number of
    such shell tubes per q'. The time extent of these q' along T2 is compared with nu^-1 R^(1/2+delta).
    """
    q = tuple(int(v) for v in q)
    predicted = params.R ** (0.5 + params.delta) / params.nu
    if not shell_tubes:
        return DoubleEndCount(anchor=q, per_cell={}, total=0, max_per_cell=0, time_extent=0.0, predicted_extent=predicted)
    incidence = incidences(TubeSet(tuple(shell_tubes) + (T2,)), grid)
    second = len(shell_tubes)
    anchored = [i for i in range(second) if q in set(incidence.cells_of(i))]
    if len(anchored) < len(shell_tubes):
        logger.info("%d of %d shell tubes miss the anchor cell %s", len(shell_tubes) - len(anchored), len(shell_tubes), q)
    min_distance = params.R ** (1 - params.delta)

    per_cell = {}
    for cell in incidence.cells_of(second):
        if cell == q or grid.cell_distance(q, cell) < min_distance:
            continue
        members = set(incidence.tubes_of(cell))
        count = sum(1 for i in anchored if i in members)
        if count > 0:
            per_cell[cell] = count
    if per_cell:
        t_centers = [grid.cell_center(c)[-1] for c in per_cell]
        extent = float(max(t_centers) - min(t_centers) + grid.cell_side)
    else:
        extent = 0.0
    return DoubleEndCount(
        anchor=q,
        per_cell={"-".join(map(str, c)): n for c, n in sorted(per_cell.items())},
        total=len(per_cell),
        max_per_cell=max(per_cell.values(), default=0),
        time_extent=extent,
        predicted_extent=predicted,
    )
