import numpy as np
import pytest

from wavepacket_lab.grids import SpatialGrid
from wavepacket_lab.symbols import FrequencyCutoff, constant_metric, make_schrodinger


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def line_grid() -> SpatialGrid:
    """[-64, 64) at spacing 1/4."""
    return SpatialGrid(dim=1, half_width=64.0, points=512)


@pytest.fixture
def free_schrodinger():
    return make_schrodinger(constant_metric(1.0), cutoff=FrequencyCutoff.NONE)
