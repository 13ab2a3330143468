import numpy as np
import pytest

from wavepacket_lab.errors import ParameterError, ResolutionError
from wavepacket_lab.flow import integrate_bicharacteristic
from wavepacket_lab.phase_space import PhasePoint, ScaleParams
from wavepacket_lab.tubes import CubeGrid, Tube, TubeFamily, TubeSet, tube_from_bichar, incidences, \
    pigeonhole_buckets, focusing_relation, double_end_count


def _static_tube(x: float, family: TubeFamily) -> Tube:
    times = np.linspace(-32.0, 32.0, 129)
    return Tube(times=times, x=np.full(len(times), x), radius=1.0, family=family)


@pytest.fixture
def grid() -> CubeGrid:
    return CubeGrid(dim=1, R=64.0)


@pytest.fixture
def two_tubes() -> TubeSet:
    return TubeSet((_static_tube(0.0, TubeFamily.FIRST), _static_tube(20.0, TubeFamily.SECOND)))


def test_cube_grid_geometry(grid):
    assert grid.cells_per_axis == 8
    assert grid.coarse_per_axis == 2
    assert grid.locate((-31.0, -31.0)) == (0, 0)
    assert grid.locate((31.9, 0.0)) == (7, 4)
    assert grid.coarse_of((7, 4)) == (1, 0)
    assert grid.cell_distance((0, 0), (3, 4)) == pytest.approx(40.0)
    with pytest.raises(ParameterError):
        grid.locate((40.0, 0.0))
    with pytest.raises(ParameterError):
        CubeGrid(dim=1, R=64.0, delta=0.6)


def test_tube_validation():
    with pytest.raises(ParameterError):
        Tube(times=[0.0, 0.0], x=[0.0, 0.0])
    with pytest.raises(ParameterError):
        Tube(times=[0.0, 1.0], x=[0.0, 0.0], radius=0.0)


def test_sparse_tube_is_rejected(grid):
    with pytest.raises(ResolutionError):
        incidences([Tube(times=[-32.0, 32.0], x=[0.0, 0.0])], grid)


def test_incidences(grid, two_tubes):
    incidence = incidences(two_tubes, grid)
    assert len(incidence.cells_of(0)) == 16
    assert len(incidence.cells_of(1)) == 8
    assert {c[0] for c in incidence.cells_of(0)} == {3, 4}
    assert incidence.counts((3, 0)) == (1, 0)
    assert incidence.counts((6, 2)) == (0, 1)
    assert incidence.is_symmetric()
    assert len(incidence.rows()) == 24


def test_pigeonhole_skips_unpaired_cells(grid, two_tubes):
    incidence = incidences(two_tubes, grid)
    buckets = pigeonhole_buckets(incidence)
    assert buckets.cells == {}
    assert buckets.tubes == {}
    assert len(buckets.unpaired) == 24
    assert buckets.cell_total() + len(buckets.unpaired) == len(incidence.cell_tubes)


def test_pigeonhole_and_focusing(grid):
    crossing = TubeSet((_static_tube(0.0, TubeFamily.FIRST), _static_tube(0.0, TubeFamily.SECOND)))
    buckets = pigeonhole_buckets(incidences(crossing, grid))
    assert buckets.cell_rows() == [{"mu1": 1, "mu2": 1, "cells": 16}]
    assert buckets.tube_rows() == [{"lambda1": 16, "mu1": 1, "mu2": 1, "tubes": 1}]
    assert buckets.cell_total() == 16
    assert buckets.unpaired == ()
    relation = focusing_relation(buckets, grid)
    assert relation.max_related() == 4
    assert relation.bound_holds()
    assert relation.maximizers[(0, (16, 1, 1))] == (0, 0)


def test_identical_tubes_share_one_bucket(grid):
    tubes = TubeSet(tuple(_static_tube(0.0, TubeFamily.FIRST) for _ in range(3)) + (_static_tube(0.0, TubeFamily.SECOND),))
    buckets = pigeonhole_buckets(incidences(tubes, grid))
    assert list(buckets.cells) == [(2, 1)]
    assert buckets.tube_rows() == [{"lambda1": 16, "mu1": 2, "mu2": 1, "tubes": 3}]
    assert buckets.panel_tube_total(2, 1) == 3


def test_bucket_indices_are_dyadic(grid):
    tubes = TubeSet((
        _static_tube(0.0, TubeFamily.FIRST),
        _static_tube(20.0, TubeFamily.SECOND),
        _static_tube(0.5, TubeFamily.SECOND),
        _static_tube(-0.5, TubeFamily.SECOND),
        _static_tube(0.2, TubeFamily.FIRST),
    ))
    incidence = incidences(tubes, grid)
    buckets = pigeonhole_buckets(incidence)
    keys = [k for key in buckets.cells for k in key] + [k for key in buckets.tubes for k in key]
    assert keys
    assert all(k >= 1 and k & (k - 1) == 0 for k in keys)
    assert len(buckets.triples) <= buckets.triple_bound()
    assert buckets.cell_total() + len(buckets.unpaired) == len(incidence.cell_tubes)


def test_tube_from_bicharacteristic(grid, free_schrodinger):
    bichar = integrate_bicharacteristic(free_schrodinger, PhasePoint(x=0.0, xi=0.5), (-32.0, 32.0), start_time=0.0)
    tube = tube_from_bichar(bichar, 64.0, family="T2")
    assert tube.family == TubeFamily.SECOND
    assert tube.radius == pytest.approx(64.0 ** 0.6)
    assert tube.label.x[0] == pytest.approx(0.0)
    assert tube.max_gap <= grid.cell_side / 4
    assert incidences([tube], grid).is_symmetric()


def test_double_end_count_without_shell(grid):
    result = double_end_count((0, 0), [], _static_tube(0.0, TubeFamily.SECOND), grid, ScaleParams(R=64.0))
    assert result.total == 0
    assert result.predicted_extent == pytest.approx(64.0 ** 0.6)
