"""Test configuration and fixtures."""

import numpy as np
import pytest

from siv_photophysics.correlation import G2Histogram
from siv_photophysics.emitter import TimestampStream
from siv_photophysics.rate_model import G2Shape, RateCoefficients, g2_irf_convolved
from siv_photophysics.tables import get_record


@pytest.fixture
def nd3_rates():
    """Rate coefficients of ND3, an emitter with strong de-shelving."""
    return get_record("ND3").rates


@pytest.fixture
def two_level_rates():
    return RateCoefficients(k21=999.0, k23=1.0, k31_0=1.0, d=0.0, sigma=5.0)


def make_histogram(shape, pe=1.0, irf_sigma=0.0, max_tau=200.0, bin_width=0.5, norm=400.0):
    """Noiseless histogram whose counts follow the model exactly."""
    half = int(round(max_tau / bin_width))
    edges = (np.arange(-half, half + 2) - 0.5) * bin_width
    centers = 0.5 * (edges[:-1] + edges[1:])
    counts = norm * np.asarray(g2_irf_convolved(shape, pe, irf_sigma, centers))
    return G2Histogram(
        bin_edges=edges,
        counts=counts,
        norm_constant=norm,
        metadata={"max_tau": max_tau, "bin_width": bin_width},
    )


@pytest.fixture
def model_shape():
    return G2Shape(a=0.8, tau1=2.0, tau2=40.0)


@pytest.fixture
def model_histogram(model_shape):
    return make_histogram(model_shape)


@pytest.fixture
def uniform_stream():
    """Uncorrelated 10 s record at 10 kcps per channel."""
    rng = np.random.default_rng(7)
    duration_ticks = 10 * 10**12
    a = np.unique(rng.integers(0, duration_ticks, 100_000))
    b = np.unique(rng.integers(0, duration_ticks, 100_000))
    return TimestampStream(a, b, duration_ticks / 1000.0, metadata={"source": "test"})
