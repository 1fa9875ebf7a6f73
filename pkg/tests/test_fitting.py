"""Tests for saturation, g² and power-dependence fits."""

import math

import numpy as np
import pytest
from conftest import make_histogram

from siv_photophysics.correlation import G2Histogram
from siv_photophysics.errors import InvalidParameters, OutOfRange
from siv_photophysics.fitting import (
    BUNCHING_UNRESOLVED,
    C_UNIDENTIFIABLE,
    STAGES_ALTERNATED,
    FitResult,
    PowerSeries,
    constant_rate_prediction,
    estimate_quantum_efficiency,
    fit_g2,
    fit_power_dependence,
    fit_saturation,
    predict_curves,
    series_from_fits,
    signal_fraction,
)
from siv_photophysics.rate_model import (
    G2Shape,
    limiting_values,
    saturation_curve,
    shape_from_rates,
)


def test_fit_g2_recovers_noiseless_shape(model_histogram, model_shape):
    fit = fit_g2(model_histogram)
    assert fit.parameters["a"] == pytest.approx(model_shape.a, rel=1e-4)
    assert fit.parameters["tau1"] == pytest.approx(model_shape.tau1, rel=1e-4)
    assert fit.parameters["tau2"] == pytest.approx(model_shape.tau2, rel=1e-4)
    assert BUNCHING_UNRESOLVED not in fit.flags
    assert fit.diagnostics["delta_g2_0"] == pytest.approx(0.0, abs=1e-4)


def test_fit_g2_with_background_and_irf():
    shape = G2Shape(a=0.5, tau1=3.0, tau2=60.0)
    hist = make_histogram(shape, pe=0.9, irf_sigma=0.4, max_tau=400.0, bin_width=0.5)
    fit = fit_g2(hist, pe=0.9, irf_sigma=0.4)
    assert fit.parameters["a"] == pytest.approx(0.5, rel=1e-3)
    assert fit.parameters["tau1"] == pytest.approx(3.0, rel=1e-3)
    assert fit.parameters["tau2"] == pytest.approx(60.0, rel=1e-3)
    assert fit.diagnostics["pe"] == 0.9


def test_fit_g2_background_correction_matters():
    """Fitting with the wrong pe distorts the recovered amplitude."""
    shape = G2Shape(a=0.5, tau1=3.0, tau2=60.0)
    hist = make_histogram(shape, pe=0.7, max_tau=400.0, bin_width=0.5)
    corrected = fit_g2(hist, pe=0.7)
    naive = fit_g2(hist, pe=1.0)
    assert corrected.parameters["a"] == pytest.approx(0.5, rel=1e-3)
    assert abs(naive.parameters["a"] - 0.5) > 0.1


def test_fit_g2_without_bunching():
    shape = G2Shape(a=0.0, tau1=2.0, tau2=math.inf, degenerate=True)
    fit = fit_g2(make_histogram(shape))
    assert BUNCHING_UNRESOLVED in fit.flags
    assert fit.parameters["a"] == 0.0
    assert math.isnan(fit.parameters["tau2"])
    assert fit.parameters["tau1"] == pytest.approx(2.0, rel=1e-4)


def test_fit_g2_uses_initial_shape(model_histogram, model_shape):
    fit = fit_g2(model_histogram, initial=G2Shape(a=0.5, tau1=1.5, tau2=50.0))
    assert fit.parameters["tau2"] == pytest.approx(model_shape.tau2, rel=1e-4)


def test_fit_g2_with_poisson_noise():
    shape = G2Shape(a=0.8, tau1=3.0, tau2=200.0)
    model = make_histogram(shape, pe=0.95, irf_sigma=0.35, max_tau=2000.0, norm=2000.0)
    rng = np.random.default_rng(11)
    noisy = G2Histogram(model.bin_edges, rng.poisson(model.counts), model.norm_constant)
    fit = fit_g2(noisy, pe=0.95, irf_sigma=0.35)
    assert fit.parameters["a"] == pytest.approx(0.8, rel=0.05)
    assert fit.parameters["tau1"] == pytest.approx(3.0, rel=0.05)
    assert fit.parameters["tau2"] == pytest.approx(200.0, rel=0.05)
    assert fit.diagnostics["reduced_chi2"] == pytest.approx(1.0, abs=0.1)


def test_fit_g2_keeps_bunching_slower_than_antibunching(model_histogram, model_shape):
    swapped = G2Shape(a=0.8, tau1=40.0, tau2=2.0, degenerate=True)
    fit = fit_g2(model_histogram, initial=swapped)
    assert fit.parameters["tau1"] == pytest.approx(model_shape.tau1, rel=1e-4)
    assert fit.parameters["tau2"] == pytest.approx(model_shape.tau2, rel=1e-4)

    rng = np.random.default_rng(5)
    for _ in range(3):
        counts = rng.poisson(model_histogram.counts)
        noisy = G2Histogram(model_histogram.bin_edges, counts, model_histogram.norm_constant)
        fit = fit_g2(noisy)
        assert fit.parameters["tau1"] < fit.parameters["tau2"]
        assert fit.uncertainties["tau2"] > 0


def test_fit_saturation_noiseless():
    powers = np.geomspace(5, 1000, 12)
    rates = saturation_curve(1.5e6, 100.0, 50.0, powers)
    fit = fit_saturation(PowerSeries(powers, rates))
    assert fit.parameters["I_inf"] == pytest.approx(1.5e6, rel=1e-5)
    assert fit.parameters["Psat"] == pytest.approx(100.0, rel=1e-5)
    assert fit.parameters["c_backgr"] == pytest.approx(50.0, rel=1e-4)


def test_fit_saturation_needs_four_points():
    with pytest.raises(InvalidParameters):
        fit_saturation(PowerSeries([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]))


def test_signal_fraction():
    fit = FitResult(
        parameters={"I_inf": 1e6, "Psat": 100.0, "c_backgr": 0.0},
        covariance=np.zeros((3, 3)),
        residual_norm=0.0,
        n_points=4,
        converged=True,
        iterations=1,
    )
    assert signal_fraction(fit, 100.0) == 1.0
    fit.parameters["c_backgr"] = 5000.0
    # 5e5 signal + 5e5 background
    assert signal_fraction(fit, 100.0) == pytest.approx(0.5)


def test_power_series_validation():
    with pytest.raises(InvalidParameters):
        PowerSeries([2.0, 1.0], [1.0, 1.0])
    with pytest.raises(InvalidParameters):
        PowerSeries([1.0, 2.0], [1.0, 1.0], uncertainties=[0.1, 0.0])


def _series(rc, powers):
    curves = predict_curves(rc, powers)
    return (
        PowerSeries(powers, curves.a, quantity="a"),
        PowerSeries(powers, curves.tau1, quantity="tau1"),
        PowerSeries(powers, curves.tau2, quantity="tau2"),
    )


def test_power_dependence_with_known_limits(nd3_rates):
    powers = np.geomspace(1, 3000, 14)
    result = fit_power_dependence(*_series(nd3_rates, powers), lv=limiting_values(nd3_rates))
    assert result.rates.sigma == pytest.approx(nd3_rates.sigma, rel=1e-3)
    assert result.rates.c == pytest.approx(nd3_rates.c, rel=1e-3)
    assert result.refinements == 0
    np.testing.assert_allclose(
        result.tau2_curve.tau2,
        predict_curves(nd3_rates, result.tau2_curve.powers).tau2,
        rtol=1e-3,
    )


def test_power_dependence_reports_stage_alternation(nd3_rates):
    powers = np.geomspace(1, 3000, 14)
    series = _series(nd3_rates, powers)
    lv = limiting_values(nd3_rates)
    alternated = fit_power_dependence(*series, lv=lv)
    assert STAGES_ALTERNATED in alternated.flags
    assert alternated.fit.diagnostics["stage_rounds"] > 1

    single = fit_power_dependence(*series, lv=lv, single_pass=True)
    assert STAGES_ALTERNATED not in single.flags
    assert single.fit.diagnostics["stage_rounds"] == 1
    assert single.rates.sigma == pytest.approx(nd3_rates.sigma, rel=0.05)


def test_power_dependence_estimates_limits(nd3_rates):
    powers = np.geomspace(0.05, 1e5, 20)
    result = fit_power_dependence(*_series(nd3_rates, powers))
    assert result.rates.sigma == pytest.approx(nd3_rates.sigma, rel=0.1)
    assert result.rates.k21 == pytest.approx(nd3_rates.k21, rel=0.1)
    assert result.rates.d == pytest.approx(nd3_rates.d, rel=0.1)
    assert C_UNIDENTIFIABLE not in result.flags


def test_power_dependence_without_saturating_deshelving(two_level_rates):
    powers = np.geomspace(1, 3000, 10)
    lv = limiting_values(two_level_rates)
    result = fit_power_dependence(*_series(two_level_rates, powers), lv=lv)
    assert C_UNIDENTIFIABLE in result.flags
    assert result.rates.c == 0.0
    assert result.rates.sigma == pytest.approx(5.0, rel=1e-3)


def test_constant_rate_prediction_differs_at_low_power(nd3_rates):
    k31 = nd3_rates.k31_0 + nd3_rates.d
    const = constant_rate_prediction(nd3_rates.k21, nd3_rates.k23, k31, nd3_rates.sigma, [1.0])
    deshelving = shape_from_rates(nd3_rates, 1.0)
    assert const.tau2[0] < deshelving.tau2 / 10


def test_series_from_fits_drops_unresolved_points():
    def fit(a, tau1, tau2, flags=()):
        return FitResult(
            parameters={"a": a, "tau1": tau1, "tau2": tau2},
            covariance=np.diag([0.01, 0.01, 1.0]),
            residual_norm=0.0,
            n_points=10,
            converged=True,
            iterations=1,
            flags=list(flags),
        )

    fits = [
        fit(0.0, 3.0, math.nan, [BUNCHING_UNRESOLVED]),
        fit(0.5, 2.0, 40.0),
        fit(0.9, 1.0, 30.0),
    ]
    series_a, series_tau1, series_tau2 = series_from_fits([1.0, 10.0, 100.0], fits)
    np.testing.assert_array_equal(series_tau1.powers, [1.0, 10.0, 100.0])
    np.testing.assert_array_equal(series_a.powers, [10.0, 100.0])
    np.testing.assert_array_equal(series_tau2.values, [40.0, 30.0])


def test_quantum_efficiency(nd3_rates):
    qe = estimate_quantum_efficiency(2.46e6, nd3_rates, 0.25, 0.78)
    assert qe == pytest.approx(0.032, abs=0.002)
    with pytest.raises(OutOfRange):
        estimate_quantum_efficiency(1e9, nd3_rates, 0.25, 0.78)
    with pytest.raises(InvalidParameters):
        estimate_quantum_efficiency(2.46e6, nd3_rates, 0.0, 0.78)
