import math

import numpy as np
import pytest

from wavepacket_lab.errors import ResolutionError
from wavepacket_lab.fbi import PhaseSpaceGrid, transform_constant, phase_space_grid_for, fbi_forward, fbi_adjoint, \
    localize, localize_with_report, packet_coefficients, magnitude_table
from wavepacket_lab.grids import SpatialField, SpatialGrid
from wavepacket_lab.phase_space import PhaseSpaceRegion, coherent_state, lattice_points


def _band_limited(grid: SpatialGrid, rng: np.random.Generator, k_max: float = 1.0) -> SpatialField:
    spectrum = rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)
    spectrum[np.abs(grid.frequency_axis) > k_max] = 0.0
    return SpatialField(grid, np.fft.ifft(spectrum))


@pytest.mark.parametrize("dim", [1, 2])
def test_transform_constant(dim):
    c = transform_constant(16.0, dim)
    assert c ** 2 * (2 * math.pi) ** dim * (16.0 * math.pi) ** (dim / 2) == pytest.approx(1.0)


def test_isometry_and_inversion(rng):
    grid = SpatialGrid(dim=1, half_width=32.0, points=256)
    f = _band_limited(grid, rng)
    transformed = fbi_forward(f, 16.0)
    assert transformed.norm() == pytest.approx(f.norm(), rel=1e-8)
    restored = fbi_adjoint(transformed, 16.0)
    assert (restored - f).norm() <= 1e-8 * f.norm()


def test_forward_rejects_unresolved_data(rng):
    grid = SpatialGrid(dim=1, half_width=32.0, points=256)
    with pytest.raises(ResolutionError):
        fbi_forward(SpatialField(grid, rng.normal(size=grid.shape)), 16.0)
    with pytest.raises(ResolutionError):
        PhaseSpaceGrid.build(grid, 256.0)


def test_coherent_state_peaks_at_its_center():
    psgrid = phase_space_grid_for(16.0)
    assert psgrid.spatial.spacing == 0.25
    assert psgrid.x_spacing == 1.0
    xi0 = 10 * math.pi / 32
    transformed = fbi_forward(coherent_state(2.0, xi0, 16.0, psgrid.spatial), 16.0, psgrid)
    x, xi = transformed.peak()
    assert x[0] == pytest.approx(2.0)
    assert xi[0] == pytest.approx(xi0)


@pytest.mark.parametrize("R", [16.0, 64.0, 256.0])
def test_default_grid_resolves_transform_widths(R):
    psgrid = phase_space_grid_for(R)
    assert psgrid.xi_spacing <= 1 / (4 * math.sqrt(R))
    assert psgrid.x_spacing <= math.sqrt(R) / 4


def test_localize_keeps_data_inside_the_region():
    grid = SpatialGrid(dim=1, half_width=128.0, points=512)
    f = coherent_state(0.0, 0.0, 64.0, grid)
    region = PhaseSpaceRegion(x_center=0.0, x_radius=64.0, xi_center=0.0, xi_radius=1.0)
    output, report = localize_with_report(f, region, 64.0)
    assert (output - f).norm() < 1e-6 * f.norm()
    assert report.input_norm == pytest.approx(f.norm())


def test_localize_removes_data_outside_the_region():
    grid = SpatialGrid(dim=1, half_width=128.0, points=512)
    f = coherent_state(0.0, 0.0, 64.0, grid)
    far = PhaseSpaceRegion(x_center=120.0, x_radius=8.0, xi_center=0.0, xi_radius=1.0)
    assert localize(f, far, 64.0).norm() < 1e-10 * f.norm()


def test_packet_coefficients(line_grid):
    f = coherent_state(0.0, 0.5, 16.0, line_grid)
    lattice = lattice_points(16.0, PhaseSpaceRegion(x_center=0.0, x_radius=8.0, xi_center=0.5, xi_radius=0.5))
    alphas = packet_coefficients(f, lattice, 16.0)
    assert alphas.shape == (len(lattice),)
    assert float(np.sum(alphas ** 2)) <= f.norm() ** 2 * (1 + 1e-9)
    best = lattice.points[int(np.argmax(alphas))]
    assert best.x == (0.0,)
    assert best.xi == (0.5,)


def test_magnitude_table_peaks_at_the_packet():
    psgrid = phase_space_grid_for(16.0)
    transformed = fbi_forward(coherent_state(2.0, 0.0, 16.0, psgrid.spatial), 16.0, psgrid)
    rows = magnitude_table(transformed)
    assert len(rows) == psgrid.center_count * psgrid.spatial.points
    best = max(rows, key=lambda row: row["magnitude"])
    assert best["x0"] == pytest.approx(2.0)
    assert best["xi0"] == pytest.approx(0.0)
