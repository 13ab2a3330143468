import asyncio
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from wavepacket_lab.errors import FlowEscapeError, ParameterError, TimeRangeError
from wavepacket_lab.flow import integrate_bicharacteristic, integrate_many, symplectic_defect, finite_difference_jacobian, \
    richardson_ratio, time_reversal_error, homogeneity_report, bilipschitz_report, separation_report, averaged_hessian, \
    variational_flow, write_trajectory_csv
from wavepacket_lab.phase_space import PhasePoint, PhaseSpaceRegion
from wavepacket_lab.symbols import FrequencyCutoff, constant_metric, cosine_metric, make_schrodinger, make_halfwave


@pytest.fixture
def cosine_schrodinger():
    return make_schrodinger(cosine_metric(dim=1, nu=1.5, eps=0.2, scale=3.0), cutoff=FrequencyCutoff.NONE)


def test_free_schrodinger_closed_form(free_schrodinger):
    path = integrate_bicharacteristic(free_schrodinger, PhasePoint(x=0.3, xi=0.7), (0.0, 5.0))
    assert path.x[-1, 0] == pytest.approx(7.3)
    assert path.xi[-1, 0] == pytest.approx(0.7)
    assert path.psi[-1] == pytest.approx(2.45)
    assert path.psi_ode_gap < 1e-10
    x, xi, psi = path.state_at(2.5)
    assert x[0] == pytest.approx(3.8)


def test_backward_leg(free_schrodinger):
    path = integrate_bicharacteristic(free_schrodinger, PhasePoint(x=0.3, xi=0.7), (-2.0, 0.0), start_time=0.0)
    assert path.times[0] == -2.0
    assert path.point_at(-2.0).x[0] == pytest.approx(-2.5)
    assert path.point_at(0.0).x[0] == pytest.approx(0.3)


def test_halfwave_moves_at_unit_speed():
    symbol = make_halfwave(constant_metric(1.0))
    path = integrate_bicharacteristic(symbol, PhasePoint(x=-1.0, xi=0.6), (0.0, 3.0))
    assert path.x[-1, 0] == pytest.approx(2.0)
    np.testing.assert_allclose(path.psi, 0.0, atol=1e-12)


def test_time_range_and_step_checks(free_schrodinger):
    start = PhasePoint(x=0.0, xi=0.5)
    path = integrate_bicharacteristic(free_schrodinger, start, (0.0, 5.0))
    with pytest.raises(TimeRangeError):
        path.state_at(6.0)
    with pytest.raises(ParameterError):
        integrate_bicharacteristic(free_schrodinger, start, (0.0, 5.0), steps=8)
    with pytest.raises(ParameterError):
        integrate_bicharacteristic(free_schrodinger, start, (1.0, 1.0))


def test_escape_from_region(free_schrodinger):
    region = PhaseSpaceRegion(x_center=0.0, x_radius=1.0, xi_center=0.7, xi_radius=0.5)
    with pytest.raises(FlowEscapeError) as info:
        integrate_bicharacteristic(free_schrodinger, PhasePoint(x=0.0, xi=0.7), (0.0, 5.0), region=region)
    assert 0.7 < info.value.exit_time < 0.75


def test_variational_flow_is_symplectic(cosine_schrodinger):
    start = PhasePoint(x=0.5, xi=0.8)
    path = integrate_bicharacteristic(cosine_schrodinger, start, (0.0, 4.0), with_variational=True, estimate_error=False)
    defect = symplectic_defect(path.variational)
    assert defect["determinant"] < 1e-6
    assert defect["form"] < 1e-6
    jacobian = finite_difference_jacobian(cosine_schrodinger, start, 4.0, steps=256)
    np.testing.assert_allclose(path.variational[-1], jacobian, atol=1e-6)


def test_richardson_ratio_is_fourth_order(cosine_schrodinger):
    report = richardson_ratio(cosine_schrodinger, PhasePoint(x=0.5, xi=0.8), 8.0, 64)
    assert report.steps == (64, 128, 256)
    assert 12.0 <= report.ratio <= 20.0


def test_time_reversal(cosine_schrodinger):
    assert time_reversal_error(cosine_schrodinger, PhasePoint(x=0.5, xi=0.8), 4.0, steps=1024) < 1e-6


def test_halfwave_homogeneity():
    symbol = make_halfwave(cosine_metric(dim=1, nu=1.0, eps=0.25, scale=2.0))
    report = homogeneity_report(symbol, PhasePoint(x=-1.0, xi=1.2), 4.0)
    assert report.position_gap < 1e-9
    assert report.frequency_gap < 1e-9


def test_homogeneity_report_needs_first_order(free_schrodinger):
    with pytest.raises(ParameterError):
        homogeneity_report(free_schrodinger, PhasePoint(x=0.0, xi=1.0), 1.0)


def test_free_flow_is_bilipschitz(free_schrodinger):
    p = PhasePoint(x=0.0, xi=0.5)
    q = PhasePoint(x=0.0, xi=0.6)
    report = bilipschitz_report(free_schrodinger, [(p, q), (p, p)], R=16.0, T=16.0)
    assert report.violations == 0
    assert report.skipped == [1]
    assert report.ratios.shape == (1, 33)
    assert report.max_ratio == pytest.approx(3.0)


def test_free_flow_separation(free_schrodinger):
    report = separation_report(free_schrodinger, 0.0, [0.5, 1.0], T=16.0, R=16.0)
    assert report.pairs == [(0, 1)]
    np.testing.assert_allclose(report.ratios, 2.0, rtol=1e-10)
    with pytest.raises(ParameterError):
        separation_report(free_schrodinger, 0.0, [0.5, 1.0], T=2.0, R=16.0)


def test_averaged_hessian(free_schrodinger):
    path = integrate_bicharacteristic(free_schrodinger, PhasePoint(x=0.0, xi=0.5), (0.0, 4.0))
    hessian = averaged_hessian(free_schrodinger, path, 0.0, 4.0)
    np.testing.assert_allclose(hessian.matrix, [[2.0]])
    assert hessian.invertible
    with pytest.raises(ParameterError):
        averaged_hessian(free_schrodinger, path, 1.0, 1.0)


def test_integrate_many_with_executor(free_schrodinger):
    starts = [PhasePoint(x=0.0, xi=v) for v in (0.25, 0.5, 1.0)]
    with ThreadPoolExecutor(max_workers=2) as executor:
        paths = integrate_many(free_schrodinger, starts, (0.0, 2.0), executor=executor)
    assert [p.x[-1, 0] for p in paths] == pytest.approx([1.0, 2.0, 4.0])


def test_write_trajectory_csv(free_schrodinger, tmp_path):
    path = integrate_bicharacteristic(free_schrodinger, PhasePoint(x=0.0, xi=0.5), (0.0, 1.0), steps=16)
    target = tmp_path / "path.csv"
    asyncio.run(write_trajectory_csv(str(target), path))
    lines = target.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t,x0,xi0,psi"
    assert len(lines) == len(path.times) + 1


def test_free_variational_flow(free_schrodinger):
    path = integrate_bicharacteristic(free_schrodinger, PhasePoint(x=0.0, xi=0.5), (0.0, 3.0), steps=32)
    np.testing.assert_allclose(variational_flow(free_schrodinger, path)[-1], [[1.0, 6.0], [0.0, 1.0]], atol=1e-10)
