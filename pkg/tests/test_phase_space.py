import math

import numpy as np
import pytest

from wavepacket_lab.errors import ParameterError, ScaleClampWarning, TruncationWarning
from wavepacket_lab.grids import SpatialGrid
from wavepacket_lab.phase_space import PhasePoint, ScaleParams, PhaseSpaceRegion, FrequencyMode, Lattice, \
    d_r_metric, lattice_points, thicken, coherent_state, partition_weights


def test_phase_point_dimensions():
    point = PhasePoint(x=1.0, xi=2.0)
    assert point.x == (1.0,)
    assert point.dim == 1
    with pytest.raises(ParameterError):
        PhasePoint(x=(0.0, 1.0), xi=(0.0,))
    with pytest.raises(ParameterError):
        PhasePoint(x=(0.0, 0.0, 0.0), xi=(0.0, 0.0, 0.0))


def test_scale_params_validation():
    with pytest.raises(ParameterError):
        ScaleParams(R=256.0, delta=0.2, delta0=0.1)
    with pytest.raises(ParameterError):
        ScaleParams(R=0.5)


def test_scale_params_clamps_nu():
    with pytest.warns(ScaleClampWarning):
        params = ScaleParams(R=256.0, nu=0.01)
    assert params.nu == pytest.approx(256.0 ** -0.4)


def test_scale_range():
    params = ScaleParams(R=256.0)
    assert params.min_scale == 1.0
    params.check_scale(16.0)
    with pytest.raises(ParameterError):
        params.check_scale(512.0)
    assert params.spatial_tolerance() == pytest.approx(256.0 ** 0.6)
    assert params.frequency_tolerance(16.0) == pytest.approx(16.0 ** -0.4)


def test_d_r_metric():
    p1 = PhasePoint(x=0.0, xi=0.0)
    p2 = PhasePoint(x=2.0, xi=0.5)
    assert d_r_metric(p1, p2, 4.0) == pytest.approx(2.0)
    with pytest.raises(ParameterError):
        d_r_metric(p1, p2, 0.0)


def _box() -> PhaseSpaceRegion:
    return PhaseSpaceRegion(x_center=0.0, x_radius=4.0, xi_center=0.0, xi_radius=0.5)


def test_lattice_points_order():
    lattice = lattice_points(4.0, _box())
    assert len(lattice) == 15
    assert lattice.points[0] == PhasePoint(x=-4.0, xi=-0.5)
    assert lattice.points[-1] == PhasePoint(x=4.0, xi=0.5)
    assert list(lattice.indices) == sorted(lattice.indices)
    assert lattice.x_spacing == 2.0
    assert lattice.xi_spacing == 0.5


def test_sector_region_excludes_low_frequencies():
    region = PhaseSpaceRegion(x_center=0.0, x_radius=1.0, xi_center=1.0, xi_radius=0.5, mode=FrequencyMode.SECTOR)
    assert region.contains(PhasePoint(x=0.0, xi=1.5))
    assert not region.contains(PhasePoint(x=0.0, xi=0.25))
    assert not region.contains(PhasePoint(x=0.0, xi=-1.0))


def test_partition_sums_to_one_inside():
    lattice = lattice_points(4.0, _box())
    partition = partition_weights(lattice, 4.0)
    x = np.array([[-0.7], [0.0], [0.9]])
    xi = np.array([[0.1], [0.0], [-0.2]])
    np.testing.assert_allclose(partition.total(x, xi), 1.0, atol=1e-12)
    weights = partition.weights(x, xi)
    assert weights.shape == (15, 3)
    assert np.all(weights >= 0)


def test_partition_rejects_bad_lattice():
    with pytest.raises(ParameterError):
        partition_weights(Lattice(r=4.0, points=(), indices=()), 4.0)
    with pytest.raises(ParameterError):
        partition_weights(lattice_points(4.0, _box()), 16.0)


def test_thicken_margins():
    params = ScaleParams(R=256.0)
    inner = thicken(_box(), 256.0, params)
    assert inner.x_margin == pytest.approx(256.0 ** 0.6)
    assert inner.xi_margin == pytest.approx(256.0 ** -0.4)
    outer = thicken(_box(), 256.0, params, outer=True)
    assert outer.x_margin == pytest.approx(4 * 256.0 ** 0.6)
    assert outer.covers(inner)


def test_coherent_state_norm(line_grid):
    state = coherent_state(0.0, 0.5, 16.0, line_grid)
    assert state.norm() == pytest.approx((16 * math.pi) ** 0.25, rel=1e-10)
    assert state.sup_norm() == pytest.approx(1.0)


def test_coherent_state_near_seam_warns():
    grid = SpatialGrid(dim=1, half_width=32.0, points=256)
    with pytest.warns(TruncationWarning):
        coherent_state(30.0, 0.0, 16.0, grid)
