import math

import numpy as np
import pytest

from wavepacket_lab.errors import ParameterError, ResolutionError
from wavepacket_lab.grids import SpatialField, SpatialGrid, commensurate_half_width


@pytest.mark.parametrize("kwargs", [
    {"dim": 3, "half_width": 8.0, "points": 64},
    {"dim": 1, "half_width": 0.0, "points": 64},
    {"dim": 1, "half_width": 8.0, "points": 100},
    {"dim": 1, "half_width": 8.0, "points": 32},
])
def test_grid_rejects_bad_shapes(kwargs):
    with pytest.raises(ParameterError):
        SpatialGrid(**kwargs)


def test_grid_axes():
    grid = SpatialGrid(dim=1, half_width=8.0, points=64)
    assert grid.spacing == 0.25
    assert grid.period == 16.0
    assert grid.axis[0] == -8.0
    assert len(grid.axis) == 64
    assert math.isclose(grid.nyquist, 4 * math.pi)
    assert grid.frequency_axis[1] == pytest.approx(2 * math.pi / 16)


def test_covering_rounds_up_to_power_of_two():
    grid = SpatialGrid.covering(1, 10.0, 0.1)
    assert grid.points == 256
    assert grid.spacing <= 0.1


def test_field_norms():
    grid = SpatialGrid(dim=1, half_width=8.0, points=64)
    ones = SpatialField(grid, np.ones(grid.shape))
    assert ones.norm() == pytest.approx(4.0)
    assert ones.l1_norm() == pytest.approx(16.0)
    assert ones.sup_norm() == 1.0
    assert ones.inner(ones * 2j) == pytest.approx(-32j)


def test_field_shape_and_grid_mismatch():
    grid = SpatialGrid(dim=1, half_width=8.0, points=64)
    other = SpatialGrid(dim=1, half_width=4.0, points=64)
    with pytest.raises(ResolutionError):
        SpatialField(grid, np.zeros(32))
    with pytest.raises(ResolutionError):
        SpatialField(grid, np.zeros(64)) + SpatialField(other, np.zeros(64))


def test_band_limit_check(rng):
    grid = SpatialGrid(dim=1, half_width=8.0, points=64)
    smooth = SpatialField(grid, np.exp(-grid.axis ** 2 / 4))
    smooth.check_band_limit()
    noise = SpatialField(grid, rng.normal(size=grid.shape))
    with pytest.raises(ResolutionError):
        noise.check_band_limit()


def test_displacement_wraps_across_the_seam():
    grid = SpatialGrid(dim=1, half_width=8.0, points=64)
    delta = grid.displacement(np.array([7.5]))
    assert delta[0, 0] == pytest.approx(0.5)
    assert grid.boundary_distance(np.array([7.5])) == pytest.approx(0.5)


def test_commensurate_half_width():
    assert commensurate_half_width(10.0, 2 * math.pi) == pytest.approx(4 * math.pi)
    assert commensurate_half_width(2 * math.pi, 2 * math.pi) == pytest.approx(2 * math.pi)
    assert commensurate_half_width(0.1, 2 * math.pi) == pytest.approx(math.pi)
    with pytest.raises(ParameterError):
        commensurate_half_width(-1.0, 1.0)
