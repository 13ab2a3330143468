import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from wavepacket_lab import estimates
from wavepacket_lab.errors import FitError, ParameterError, ResolutionError
from wavepacket_lab.estimates import SpaceTimeCube, lp_spacetime_norm, dispersive_fit, transversality_check, \
    energy_difference, energy_gradient, energy_shell_sample, conservation_flags, quadrilinear_integral, assemble_bilinear_sweep, \
    localization_report, strichartz_bookkeeping, budget_rows, bilinear_sweep, energy_estimate_check
from wavepacket_lab.flow import integrate_bicharacteristic
from wavepacket_lab.grids import SpatialGrid
from wavepacket_lab.phase_space import PhasePoint, ScaleParams, coherent_state
from wavepacket_lab.propagate import FieldTrajectory, WavePacket


def _packet(symbol, x: float, xi: float, span=(-8.0, 8.0)) -> WavePacket:
    label = PhasePoint(x=x, xi=xi)
    bichar = integrate_bicharacteristic(symbol, label, span, start_time=0.0)
    return WavePacket(label=label, alpha=1.0, bichar=bichar, r=16.0)


@pytest.fixture
def unit_trajectory() -> FieldTrajectory:
    grid = SpatialGrid(dim=1, half_width=16.0, points=128)
    times = np.linspace(-4.0, 4.0, 33)
    return FieldTrajectory(grid=grid, times=times, values=np.ones((len(times),) + grid.shape))


@pytest.mark.parametrize("p, expected", [(1.0, 64.0), (2.0, 8.0)])
def test_lp_norm_of_constant(unit_trajectory, p, expected):
    cube = SpaceTimeCube(x_center=0.0, t_center=0.0, side=8.0)
    assert lp_spacetime_norm(unit_trajectory, p, cube) == pytest.approx(expected)


def test_lp_norm_checks(unit_trajectory):
    with pytest.raises(ResolutionError):
        lp_spacetime_norm(unit_trajectory, 2.0, SpaceTimeCube(x_center=0.0, t_center=4.0, side=8.0))
    with pytest.raises(ResolutionError):
        lp_spacetime_norm(unit_trajectory, 2.0, SpaceTimeCube(x_center=0.0, t_center=0.0, side=1.0))
    with pytest.raises(ParameterError):
        lp_spacetime_norm(unit_trajectory, 0.5, SpaceTimeCube(x_center=0.0, t_center=0.0, side=8.0))


def test_free_dispersive_slope(free_schrodinger):
    grid = SpatialGrid(dim=1, half_width=2048.0, points=8192)
    u0 = coherent_state(0.0, 0.0, 3.0, grid)
    report = dispersive_fit(free_schrodinger, u0, [0.0] + [2.0 ** k for k in range(9)])
    assert abs(report.slope + 0.5) < 0.05
    assert report.sups[0] == pytest.approx(1.0)
    assert len(report.rows()) == 10


def test_dispersive_fit_needs_times(free_schrodinger, line_grid):
    with pytest.raises(FitError):
        dispersive_fit(free_schrodinger, coherent_state(0.0, 0.0, 3.0, line_grid), [0.0, 1.0, 2.0, 4.0])


def test_energy_shell_of_free_symbols(free_schrodinger):
    z = ((0.0,), 0.0)
    eta = np.linspace(0.0, 2.0, 201).reshape(-1, 1)
    shell = energy_shell_sample(free_schrodinger, free_schrodinger, z, (1.0,), (0.0,), 0.015, eta)
    assert len(shell) == 1
    assert shell.points[0, 0] == pytest.approx(1.0)
    gradient = energy_gradient(free_schrodinger, free_schrodinger, z, (1.0,), (0.0,), np.array([[0.3]]))
    assert gradient[0, 0] == pytest.approx(-2.0)
    with pytest.raises(ParameterError):
        energy_shell_sample(free_schrodinger, free_schrodinger, z, (1.0,), (0.0,), 0.0, eta)


def test_transversality_of_opposite_packets(free_schrodinger):
    b1 = _packet(free_schrodinger, 0.0, 0.5).bichar
    b2 = _packet(free_schrodinger, 0.0, -0.5).bichar
    report = transversality_check(free_schrodinger, free_schrodinger, b1, b2, 1.0, t_ref=0.0)
    assert report.delta_v_norm == pytest.approx(2.0)
    assert report.forms == pytest.approx([2.0, 2.0])
    assert report.projections == pytest.approx([2.0, -2.0])
    assert report.averaged_form == pytest.approx(2.0)
    assert report.singular == [False, False]


def test_conservation_flags(free_schrodinger):
    a = _packet(free_schrodinger, 0.0, 0.5)
    b = _packet(free_schrodinger, 0.0, -0.5)
    c = _packet(free_schrodinger, 0.0, 0.1)
    cube = SpaceTimeCube(x_center=0.0, t_center=0.0, side=16.0)
    params = ScaleParams(R=256.0)
    assert conservation_flags([a, b, b, a], cube, params, free_schrodinger, free_schrodinger).all_ok
    flags = conservation_flags([a, c, b, a], cube, params, free_schrodinger, free_schrodinger)
    assert not flags.momentum_ok
    assert flags.momentum_gap == pytest.approx(0.6)
    with pytest.raises(ParameterError):
        conservation_flags([a, b, a], cube, params, free_schrodinger, free_schrodinger)


def test_quadrilinear_needs_four_factors(unit_trajectory):
    cube = SpaceTimeCube(x_center=0.0, t_center=0.0, side=8.0)
    with pytest.raises(ParameterError):
        quadrilinear_integral([unit_trajectory] * 3, cube)


def test_bilinear_sweep_fits():
    R_list, nu_list = [64.0, 256.0, 1024.0], [1.0, 0.5, 0.25]
    table = {(R, nu): 2 * nu ** -0.5 for R in R_list for nu in nu_list}
    sweep = assemble_bilinear_sweep(2.0, R_list, nu_list, table)
    assert sweep.nu_slope == pytest.approx(-0.5)
    assert sweep.r_slope == pytest.approx(0.0, abs=1e-12)
    assert sweep.cells[2].nu == 0.25
    assert sweep.cells[2].normalized == pytest.approx(2.0)
    assert len(sweep.rows()) == 9


def test_localization_of_free_packet(free_schrodinger, line_grid):
    packet = _packet(free_schrodinger, 0.0, 0.5)
    report = localization_report(packet, free_schrodinger, 16.0, t_grid=(-8.0, 0.0, 8.0), grid=line_grid)
    assert report.max_tail < 1e-4
    assert report.peaks_within_bin
    np.testing.assert_allclose(report.tau_expected, -0.25)


def test_budget_rows():
    rows = budget_rows(strichartz_bookkeeping(["1"], 1))
    assert rows[0]["sigma"] == "1/2"
    assert rows[0]["kappa0"] == ""


def test_energy_difference_of_free_symbols(free_schrodinger):
    eta = np.array([[1.0], [0.5], [0.0]])
    values = energy_difference(free_schrodinger, free_schrodinger, ((0.0,), 0.0), (1.0,), (0.0,), eta)
    np.testing.assert_allclose(values, [0.0, 1.0, 2.0])


def test_bilinear_sweep_runs_every_cell(monkeypatch, free_schrodinger):
    calls = []

    def _cell(sym1, sym2, R, nu, p, data_spec, dim):
        calls.append((R, nu, p, dim))
        return R ** 0.05 * nu ** -0.5

    monkeypatch.setattr(estimates, "bilinear_cell", _cell)
    with ThreadPoolExecutor(max_workers=3) as executor:
        sweep = bilinear_sweep(free_schrodinger, free_schrodinger, None, [256.0, 64.0, 1024.0], [0.25, 1.0, 0.5], executor=executor)
    assert len(calls) == 9
    assert {(p, dim) for _, _, p, dim in calls} == {(2.0, 1)}
    assert sweep.p == 2.0
    assert sweep.nu_slope == pytest.approx(-0.5)
    assert sweep.r_slope == pytest.approx(0.05)
    assert [(c.R, c.nu) for c in sweep.cells[:3]] == [(64.0, 1.0), (64.0, 0.5), (64.0, 0.25)]
    assert sweep.cells[0].normalized == pytest.approx(1.0)
    with pytest.raises(FitError):
        bilinear_sweep(free_schrodinger, free_schrodinger, None, [64.0, 256.0], [1.0, 0.5, 0.25])


def test_energy_estimate_check(unit_trajectory):
    cube = SpaceTimeCube(x_center=0.0, t_center=0.0, side=8.0)
    report = energy_estimate_check([unit_trajectory, unit_trajectory], [unit_trajectory], cube)
    assert report.l1_norm == pytest.approx(128.0)
    assert report.bound == pytest.approx(8.0 * math.sqrt(2.0))
    assert (report.count1, report.count2) == (2, 1)
    assert report.ratio == pytest.approx(16.0 / math.sqrt(2.0))
    empty = energy_estimate_check([], [unit_trajectory], cube)
    assert empty.l1_norm == 0.0
    assert empty.ratio == 0.0
