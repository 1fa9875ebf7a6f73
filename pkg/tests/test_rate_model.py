"""Tests for the closed-form three-level model."""

import math

import numpy as np
import pytest

from siv_photophysics.errors import (
    ComplexEigenvalue,
    InvalidLimits,
    InvalidParameters,
    UnknownCalibration,
)
from siv_photophysics.rate_model import (
    G2Shape,
    LimitingValues,
    RateCoefficients,
    absorption_cross_section,
    constant_rate_coefficients,
    deshelving_rate,
    eigen_shape,
    g2_analytic,
    g2_irf_convolved,
    g2_with_background,
    limiting_values,
    power_to_photon_flux,
    rates_from_limits,
    saturation_curve,
    shape_from_rates,
    steady_state,
)


def test_shape_matches_eigen_solve():
    """Closed-form relaxation times agree with a dense eigen-solve over random rates."""
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(1000):
        rc = RateCoefficients(
            k21=rng.uniform(100, 5000),
            k23=rng.uniform(0.5, 150),
            k31_0=rng.uniform(0.05, 2),
            d=rng.uniform(0, 50),
            c=rng.uniform(1, 3000),
            sigma=rng.uniform(1, 15),
        )
        power = float(10 ** rng.uniform(-1, 4))
        try:
            shape = shape_from_rates(rc, power)
        except ComplexEigenvalue:
            continue
        fast, slow = eigen_shape(rc, power)
        assert 1000.0 / shape.tau1 == pytest.approx(fast, rel=1e-9)
        assert 1000.0 / shape.tau2 == pytest.approx(slow, rel=1e-9)
        assert shape.tau2 > shape.tau1
        checked += 1
    assert checked > 900


def test_g2_vanishes_at_zero_delay(nd3_rates):
    shape = shape_from_rates(nd3_rates, 100.0)
    assert g2_analytic(shape, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert g2_analytic(shape, 1e6) == pytest.approx(1.0, abs=1e-9)


def test_g2_with_background():
    """Uncorrelated background lifts g2(0) to 1 - pe²."""
    assert g2_with_background(0.0, 0.5) == pytest.approx(0.75)
    with pytest.raises(InvalidParameters):
        g2_with_background(0.0, 1.5)


def test_irf_convolution_tends_to_analytic():
    shape = G2Shape(a=0.6, tau1=2.0, tau2=30.0)
    tau = np.linspace(-50, 50, 201)
    narrow = g2_irf_convolved(shape, 1.0, 1e-4, tau)
    exact = g2_analytic(shape, tau)
    np.testing.assert_allclose(narrow, exact, atol=1e-3)


def test_irf_fills_antibunching_dip():
    shape = G2Shape(a=0.6, tau1=2.0, tau2=30.0)
    assert g2_irf_convolved(shape, 1.0, 1.0, 0.0) > 0.1
    assert g2_irf_convolved(shape, 1.0, 1.0, 500.0) == pytest.approx(1.0, abs=1e-6)


def test_degenerate_shape_without_shelving():
    rc = RateCoefficients(k21=1000.0, k23=0.0, k31_0=2.0, sigma=5.0)
    shape = shape_from_rates(rc, 10.0)
    assert shape.degenerate
    assert shape.a == 0.0
    assert shape.tau1 == pytest.approx(1000.0 / 1050.0)
    assert shape.tau2 == pytest.approx(500.0)


def test_complex_eigenvalues_rejected():
    """A cyclic 1→2→3→1 chain with balanced rates relaxes with complex eigenvalues."""
    rc = RateCoefficients(k21=1e-3, k23=1000.0, k31_0=1000.0, sigma=1.0)
    with pytest.raises(ComplexEigenvalue):
        shape_from_rates(rc, 1000.0)


def test_limits_round_trip(nd3_rates):
    recovered = rates_from_limits(limiting_values(nd3_rates))
    for name in ("k21", "k23", "k31_0", "d"):
        assert getattr(recovered, name) == pytest.approx(getattr(nd3_rates, name), rel=1e-9)


def test_limits_reject_negative_deshelving():
    lv = LimitingValues(tau1_0=1.0, tau2_0=100.0, tau2_inf=60.0, a_inf=1.0)
    with pytest.raises(InvalidLimits):
        rates_from_limits(lv)


def test_limiting_values_validate():
    with pytest.raises(InvalidLimits):
        LimitingValues(tau1_0=-1.0, tau2_0=100.0, tau2_inf=60.0, a_inf=1.0)


def test_shape_approaches_limits(nd3_rates):
    lv = limiting_values(nd3_rates)
    low = shape_from_rates(nd3_rates, 1e-4)
    high = shape_from_rates(nd3_rates, 1e7)
    assert low.tau1 == pytest.approx(lv.tau1_0, rel=1e-3)
    assert low.tau2 == pytest.approx(lv.tau2_0, rel=1e-3)
    assert high.tau2 == pytest.approx(lv.tau2_inf, rel=1e-3)
    assert high.a == pytest.approx(lv.a_inf, rel=1e-3)


def test_deshelving_rate_limits(nd3_rates):
    assert deshelving_rate(nd3_rates, 0.0) == nd3_rates.k31_0
    assert deshelving_rate(nd3_rates, math.inf) == nd3_rates.k31_0 + nd3_rates.d
    assert deshelving_rate(nd3_rates, nd3_rates.c) == pytest.approx(
        nd3_rates.k31_0 + nd3_rates.d / 2
    )


def test_steady_state(nd3_rates):
    state = steady_state(nd3_rates, 100.0)
    assert state.n1 + state.n2 + state.n3 == pytest.approx(1.0)
    saturated = steady_state(nd3_rates, math.inf)
    assert saturated.n1 == 0.0
    assert saturated.n2 == pytest.approx(0.51, abs=0.01)


def test_constant_rate_model_saturates_at_psat(nd3_rates):
    psat = 105.3
    const = constant_rate_coefficients(nd3_rates, psat)
    assert const.d == 0.0
    half = steady_state(const, psat).n2
    assert half == pytest.approx(0.5 * steady_state(const, math.inf).n2, rel=1e-9)


def test_saturation_curve():
    assert saturation_curve(1e6, 100.0, 0.0, 100.0) == pytest.approx(5e5)
    assert saturation_curve(1e6, 100.0, 50.0, 100.0) == pytest.approx(5e5 + 5000.0)


def test_photon_flux_calibration():
    assert power_to_photon_flux(692.0, 695.0) == pytest.approx(2.055e23, rel=1e-3)
    assert power_to_photon_flux(14.3, 671.0) == pytest.approx(4.104e21, rel=1e-3)
    assert power_to_photon_flux(1.0, 532.0, calibration=1e20) == 1e20
    with pytest.raises(UnknownCalibration):
        power_to_photon_flux(1.0, 532.0)


def test_absorption_cross_section():
    assert absorption_cross_section(12.0, 671.0) == pytest.approx(4.18e-14, rel=1e-3)
    assert absorption_cross_section(4.2, 695.0) == pytest.approx(1.414e-14, rel=1e-3)


def test_rate_coefficients_validate():
    with pytest.raises(InvalidParameters):
        RateCoefficients(k21=0.0, k23=1.0, k31_0=1.0)
    with pytest.raises(InvalidParameters):
        RateCoefficients(k21=1.0, k23=-1.0, k31_0=1.0)
    with pytest.raises(InvalidParameters):
        RateCoefficients(k21=1.0, k23=1.0, k31_0=float("nan"))
