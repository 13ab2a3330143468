import math

import numpy as np
import pytest

from wavepacket_lab.errors import ParameterError, ResolutionError, StabilityError, TimeRangeError
from wavepacket_lab.flow import integrate_bicharacteristic
from wavepacket_lab.grids import SpatialField, SpatialGrid, commensurate_half_width
from wavepacket_lab.phase_space import PhasePoint, PhaseSpaceRegion, coherent_state
from wavepacket_lab.propagate import PropagationMethod, WavePacket, WeylOperator, weyl_apply, propagate_reference, \
    group_law_error, frozen_packet, packet_evolve, evolve_packets, wavepacket_decompose, parametrix_defect, almost_orthogonality, \
    essentially_constant_ratio, amplitude_report
from wavepacket_lab.symbols import FrequencyCutoff, FunctionSymbol, constant_metric, cosine_metric, make_schrodinger


@pytest.fixture
def gaussian(line_grid):
    return coherent_state(0.0, 0.0, 16.0, line_grid)


@pytest.fixture
def cosine_setup():
    symbol = make_schrodinger(cosine_metric(dim=1, nu=1.0, eps=0.2, scale=2.0), cutoff=FrequencyCutoff.NONE)
    grid = SpatialGrid(dim=1, half_width=commensurate_half_width(10.0, 4 * math.pi), points=64)
    return symbol, grid


def test_free_gaussian_spreads(free_schrodinger, gaussian):
    trajectory = propagate_reference(free_schrodinger, gaussian, [0.0, 8.0], method=PropagationMethod.EXPONENTIAL)
    assert trajectory.sup_norms()[0] == pytest.approx(1.0)
    assert trajectory.sup_norms()[1] == pytest.approx(2 ** -0.25, rel=1e-10)
    assert trajectory.norm_drift < 1e-12


def test_rk4_matches_exponential(free_schrodinger, gaussian):
    times = [0.0, 1.0, 2.0]
    rk4 = propagate_reference(free_schrodinger, gaussian, times)
    exact = propagate_reference(free_schrodinger, gaussian, times, method="exponential")
    assert rk4.steps > 0
    assert float(np.max((rk4 - exact).norms())) < 1e-8 * gaussian.norm()


def test_reference_rejects_bad_input(free_schrodinger, gaussian):
    with pytest.raises(StabilityError) as info:
        propagate_reference(free_schrodinger, gaussian, [0.0, 1.0], step=1.0)
    assert info.value.suggested_step < 1.0
    with pytest.raises(ParameterError):
        propagate_reference(free_schrodinger, gaussian, [1.0, 0.0])


def test_group_law(free_schrodinger, gaussian):
    errors = group_law_error(free_schrodinger, gaussian, [(0.0, 1.0, 3.0), (0.0, 2.0, -1.0)], method="exponential")
    assert max(errors) < 1e-12


def test_free_symbol_is_diagonal(free_schrodinger, line_grid):
    k = 8 * math.pi / line_grid.half_width
    wave = SpatialField(line_grid, np.exp(1j * k * line_grid.axis))
    assert WeylOperator(free_schrodinger, line_grid).kind == "diagonal"
    np.testing.assert_allclose(weyl_apply(free_schrodinger, wave).values, k ** 2 * wave.values, atol=1e-10)


def test_cutoff_must_fit_the_grid():
    symbol = make_schrodinger(constant_metric(1.0))
    with pytest.raises(ResolutionError):
        WeylOperator(symbol, SpatialGrid(dim=1, half_width=64.0, points=64))


def test_banded_operator_matches_dense(cosine_setup):
    symbol, grid = cosine_setup
    operator = WeylOperator(symbol, grid)
    assert operator.kind == "banded"
    banded = operator.matrix.toarray()
    np.testing.assert_allclose(banded, operator._assemble_dense(), atol=1e-10)
    np.testing.assert_allclose(banded, banded.conj().T, atol=1e-12)


def test_banded_operator_logs_lazily(cosine_setup, caplog):
    symbol, grid = cosine_setup
    with caplog.at_level("DEBUG", logger="wavepacket_lab.propagate"):
        WeylOperator(symbol, grid)
    record = next(r for r in caplog.records if r.msg.startswith("Banded Weyl matrix"))
    assert record.args[1] == symbol.name


def test_banded_rk4_matches_exponential(cosine_setup):
    symbol, grid = cosine_setup
    u0 = coherent_state(0.0, 0.5, 4.0, grid)
    rk4 = propagate_reference(symbol, u0, [0.0, 1.0])
    exact = propagate_reference(symbol, u0, [0.0, 1.0], method="exponential")
    assert (rk4.field(1) - exact.field(1)).norm() < 1e-8 * u0.norm()
    assert exact.norm_drift < 1e-10


def test_decomposition_reconstructs_data(free_schrodinger):
    grid = SpatialGrid(dim=1, half_width=64.0, points=256)
    u0 = coherent_state(0.0, 0.5, 16.0, grid).normalized()
    region = PhaseSpaceRegion(x_center=0.0, x_radius=8.0, xi_center=0.5, xi_radius=0.5)
    result = wavepacket_decompose(u0, free_schrodinger, 16.0, region, [0.0, 2.0], method="exponential")
    assert result.packets
    assert float(np.max(result.remainder_l2)) < 1e-4
    assert result.remainder_l2[1] == pytest.approx(result.remainder_l2[0], rel=1e-6, abs=1e-12)
    assert 0.25 < result.frame_ratio <= 1 + 1e-6
    assert result.lattice_size >= len(result.packets)


def test_frozen_packet_is_normalized(free_schrodinger, line_grid):
    bichar = integrate_bicharacteristic(free_schrodinger, PhasePoint(x=0.0, xi=0.5), (0.0, 4.0))
    packet = WavePacket(label=PhasePoint(x=0.0, xi=0.5), alpha=1.0, bichar=bichar, r=16.0)
    phi = frozen_packet(packet, 2.0, line_grid)
    assert phi.norm() == pytest.approx(1.0)
    assert line_grid.axis[int(np.argmax(np.abs(phi.values)))] == pytest.approx(2.0)


def test_almost_orthogonality_of_orthonormal_waves():
    grid = SpatialGrid(dim=1, half_width=8.0, points=64)
    waves = [
        SpatialField(grid, np.exp(1j * j * math.pi / 8 * grid.axis) / math.sqrt(grid.period))
        for j in range(4)
    ]
    report = almost_orthogonality(waves)
    assert report.sizes == [1, 2, 4]
    assert report.constant == pytest.approx(1.0)


def test_essentially_constant_ratio(line_grid):
    flat = SpatialField(line_grid, np.ones(line_grid.shape))
    assert essentially_constant_ratio(flat, [0.0], 16.0) == pytest.approx(1.0)


def _moving_packet(symbol, r: float, t_max: float) -> WavePacket:
    label = PhasePoint(x=0.0, xi=0.5)
    return WavePacket(label=label, alpha=1.0, bichar=integrate_bicharacteristic(symbol, label, (0.0, t_max)), r=r)


def test_transport_packet_has_no_defect(line_grid):
    transport = FunctionSymbol(lambda x, t, xi: 2.0 * xi[..., 0], dim=1, homogeneity=1, time_independent=True, x_independent=True)
    report = parametrix_defect(transport, _moving_packet(transport, 16.0, 4.0), [0.0, 2.0, 4.0], line_grid)
    assert report.max_defect <= 1e-8


def test_free_parametrix_defect(free_schrodinger, line_grid):
    # (i d_t + d^2) of the frozen Gaussian is (|y - x|^2 / r^2 - 1 / r) times the packet
    report = parametrix_defect(free_schrodinger, _moving_packet(free_schrodinger, 16.0, 4.0), [0.0, 4.0], line_grid)
    np.testing.assert_allclose(report.defects, math.sqrt(3) / 2 / 16.0, rtol=1e-6)


def test_parametrix_defect_decays_with_scale(free_schrodinger):
    grid = SpatialGrid(dim=1, half_width=256.0, points=1024)
    scales = [64.0, 256.0, 1024.0]
    defects = []
    for R in scales:
        t_max = math.sqrt(R)
        report = parametrix_defect(free_schrodinger, _moving_packet(free_schrodinger, R, t_max), [0.0, t_max / 2, t_max], grid)
        defects.append(report.max_defect)
    slope = np.polyfit(np.log(scales), np.log(defects), 1)[0]
    assert slope <= -0.4


def test_frozen_packet_tracks_exact_evolution(free_schrodinger, line_grid):
    packet = _moving_packet(free_schrodinger, 64.0, 8.0)
    start = packet_evolve(packet, free_schrodinger, 0.0, line_grid, mode="exact", method="exponential")
    assert (start - coherent_state(0.0, 0.5, 64.0, line_grid).normalized()).norm() < 1e-10
    for t in (0.0, 4.0, 8.0):
        frozen = packet_evolve(packet, free_schrodinger, t, line_grid)
        exact = packet_evolve(packet, free_schrodinger, t, line_grid, mode="exact", method="exponential")
        assert (frozen - exact).norm() <= 0.2
    with pytest.raises(TimeRangeError):
        packet_evolve(packet, free_schrodinger, 9.0, line_grid)


def test_amplitude_report_of_moving_packet(free_schrodinger, line_grid):
    packet = _moving_packet(free_schrodinger, 16.0, 8.0)
    trajectory = evolve_packets([packet], free_schrodinger, [0.0, 4.0, 8.0], line_grid, method="exponential")[0]
    report = amplitude_report(trajectory, packet)
    assert report.reference == pytest.approx(16.0 ** -0.25)
    assert report.constant == pytest.approx(math.pi ** -0.25, rel=1e-6)
    assert np.all(np.diff(report.sups) < 0)
