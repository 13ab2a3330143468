import asyncio
import json

import numpy as np
import pytest

from wavepacket_lab.errors import FitError
from wavepacket_lab.utils import smooth_step, plateau_bump, band_cutoff, periodic_delta, dyadic_floor, loglog_fit, \
    dump_json, dump_csv


def test_smooth_step_endpoints():
    np.testing.assert_allclose(smooth_step([-1.0, 0.0, 0.5, 1.0, 2.0]), [0.0, 0.0, 0.5, 1.0, 1.0])


def test_bumps():
    np.testing.assert_allclose(plateau_bump([0.0, 0.5, 1.0, 2.0, 2.5]), [1.0, 1.0, 1.0, 0.0, 0.0])
    np.testing.assert_allclose(band_cutoff([0.5, 1.0, 2.0, 2.5]), [1.0, 1.0, 0.0, 0.0])
    assert 0.0 < float(band_cutoff(1.5)) < 1.0


def test_periodic_delta():
    assert float(periodic_delta(9.0, -9.0, 20.0)) == pytest.approx(-2.0)
    assert float(periodic_delta(9.0, -9.0, None)) == 18.0


@pytest.mark.parametrize("count, expected", [(1, 1), (5, 4), (8, 8), (1023, 512)])
def test_dyadic_floor(count, expected):
    assert dyadic_floor(count) == expected


def test_dyadic_floor_rejects_zero():
    with pytest.raises(ValueError):
        dyadic_floor(0)


def test_loglog_fit_recovers_power_law():
    x = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    fit = loglog_fit(x, 3 * x ** -0.5)
    assert fit.slope == pytest.approx(-0.5)
    assert fit.prefactor == pytest.approx(3.0)
    assert fit.points == 5
    assert fit.ci95[0] <= fit.slope <= fit.ci95[1]


def test_loglog_fit_needs_points():
    with pytest.raises(FitError):
        loglog_fit([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(FitError):
        loglog_fit([1.0, 2.0, -1.0], [1.0, 2.0, 3.0])


def test_dumps(tmp_path):
    json_path = str(tmp_path / "nested" / "summary.json")
    csv_path = str(tmp_path / "table.csv")
    asyncio.run(dump_json(json_path, {"value": np.float64(1.5), "array": np.arange(3)}))
    asyncio.run(dump_csv(csv_path, [{"a": 1, "b": 2}, {"a": 3, "b": 4}]))
    with open(json_path, encoding="utf-8") as f:
        assert json.load(f) == {"value": 1.5, "array": [0, 1, 2]}
    with open(csv_path, encoding="utf-8") as f:
        assert f.read() == "a,b\n1,2\n3,4\n"
