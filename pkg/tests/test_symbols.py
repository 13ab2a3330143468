import asyncio
from fractions import Fraction

import numpy as np
import pytest

from wavepacket_lab.errors import ConstructionError, ParameterError, UnsupportedRepresentationError
from wavepacket_lab.symbols import FrequencyCutoff, FunctionSymbol, SampleBox, constant_metric, cosine_metric, \
    perturbed_identity_metric, fourier_metric, lowpass_metric, make_schrodinger, make_halfwave, derivative_check, \
    homogeneity_defect, regularity_constants, loss_budget, save_metric_data, load_metric_data


X = np.array([[0.4], [1.3]])
XI = np.array([[0.7], [-0.5]])


def test_constant_schrodinger_closed_forms():
    symbol = make_schrodinger(constant_metric(2.0), cutoff=FrequencyCutoff.NONE)
    x, xi = np.array([[0.0]]), np.array([[3.0]])
    assert symbol.value(x, 0.0, xi)[0] == pytest.approx(18.0)
    assert symbol.grad_xi(x, 0.0, xi)[0, 0] == pytest.approx(12.0)
    assert symbol.hess_xi(x, 0.0, xi)[0, 0, 0] == pytest.approx(4.0)
    assert symbol.x_independent
    assert homogeneity_defect(symbol, x, 0.0, xi) == pytest.approx(0.0, abs=1e-12)


def test_halfwave_is_first_order():
    symbol = make_halfwave(constant_metric(4.0))
    np.testing.assert_allclose(symbol.value(X, 0.0, XI), 2 * np.abs(XI[:, 0]))
    assert symbol.homogeneity == 1
    assert symbol.cutoff == FrequencyCutoff.ANNULUS


def test_indefinite_metric_has_no_halfwave():
    with pytest.raises(ConstructionError):
        make_halfwave(constant_metric(np.diag([1.0, -1.0])))


@pytest.mark.parametrize("factory", [make_schrodinger, make_halfwave])
def test_closed_forms_match_differences(factory):
    symbol = factory(cosine_metric(dim=1, nu=1.5, eps=0.2, scale=3.0))
    report = derivative_check(symbol, X, 0.0, XI)
    assert max(report.values()) < 1e-6


def test_vanishing_derivatives_compare_on_symbol_scale(caplog):
    symbol = make_halfwave(cosine_metric(dim=1, nu=1.5, eps=0.2, scale=3.0))
    assert np.max(np.abs(symbol.hess_xi(X, 0.0, XI))) < 1e-12
    with caplog.at_level("WARNING", logger="wavepacket_lab"):
        report = derivative_check(symbol, X, 0.0, XI)
    assert report["hess_xi"] < 1e-6
    assert report["third_xi"] < 1e-6
    assert "above tolerance" not in caplog.text


def test_function_symbol_without_homogeneity():
    symbol = FunctionSymbol(lambda x, t, xi: xi[..., 0] ** 2, dim=1)
    np.testing.assert_allclose(symbol.grad_xi(X, 0.0, XI)[:, 0], 2 * XI[:, 0], rtol=1e-8)
    with pytest.raises(ParameterError):
        homogeneity_defect(symbol, X, 0.0, XI)


def test_regularity_of_constant_metric():
    symbol = make_schrodinger(constant_metric(np.diag([1.0, 2.0])))
    report = regularity_constants(symbol, SampleBox(x_center=(0.0, 0.0), x_radius=1.0), R=100.0)
    assert report.epsilon_hat == 0.0
    assert report.d1_hat == pytest.approx(8.0)
    assert report.d2_hat == pytest.approx(8.0)


@pytest.mark.parametrize("R", [100.0, 1000.0])
def test_regularity_of_perturbed_metric_stays_bounded(R):
    eps = 0.01
    symbol = make_schrodinger(perturbed_identity_metric(1, eps, R))
    report = regularity_constants(symbol, SampleBox(x_center=(0.0,), x_radius=R), R=R, seed=3)
    assert 0 < report.epsilon_hat <= 2 * eps


def test_fourier_metric_reproduces_band_limited_metric():
    metric = cosine_metric(dim=1, nu=1.0, eps=0.2, scale=2.0)
    fourier = fourier_metric(metric, 2 * np.pi, 16)
    x = np.array([[0.3], [1.7], [-4.0]])
    np.testing.assert_allclose(fourier.matrix(x), metric.matrix(x), atol=1e-12)
    np.testing.assert_allclose(fourier.gradient(x), metric.gradient(x), atol=1e-12)


def test_lowpass_metric():
    fourier = fourier_metric(cosine_metric(dim=1, nu=1.0, eps=0.2, scale=2.0), 2 * np.pi, 16)
    x = np.array([[0.3], [1.7]])
    np.testing.assert_allclose(lowpass_metric(fourier, 10.0).matrix(x), fourier.matrix(x), atol=1e-12)
    np.testing.assert_allclose(lowpass_metric(fourier, 0.2).matrix(x), 1.0, atol=1e-12)
    with pytest.raises(UnsupportedRepresentationError):
        lowpass_metric(cosine_metric(), 1.0)


def test_metric_data_survives_disk(tmp_path):
    data = fourier_metric(cosine_metric(dim=2, nu=1.0, eps=0.1, scale=1.0), np.pi, 8).fourier_data
    prefix = str(tmp_path / "metric")
    asyncio.run(save_metric_data(data, prefix))
    loaded = asyncio.run(load_metric_data(prefix))
    assert loaded.mode_counts == (8, 8)
    np.testing.assert_array_equal(loaded.coefficients, data.coefficients)


@pytest.mark.parametrize("s, sigma, kappa1, kappa", [
    ("1", Fraction(1, 2), Fraction(0), Fraction(0)),
    ("0", Fraction(2, 3), Fraction(1, 6), Fraction(1, 6)),
    ("1/2", Fraction(4, 7), Fraction(1, 14), Fraction(1, 14)),
])
def test_loss_budget_exponents(s, sigma, kappa1, kappa):
    budget = loss_budget(s, 1)
    assert budget.sigma == sigma
    assert budget.kappa1 == kappa1
    assert budget.kappa == kappa
    assert budget.kappa0 is None


def test_loss_budget_with_lebesgue_exponent():
    budget = loss_budget("1/2", 3, "10/3")
    assert budget.kappa0 == Fraction(1, 10)
    assert budget.schrodinger_endpoint_q == 6
    assert budget.to_dict()["sigma"] == "4/7"


@pytest.mark.parametrize("s, q", [("2", None), ("1", "2")])
def test_loss_budget_rejects_out_of_range(s, q):
    with pytest.raises(ParameterError):
        loss_budget(s, 3, q)
