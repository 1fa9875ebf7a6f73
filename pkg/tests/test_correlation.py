"""Tests for g² histograms and time traces."""

import numpy as np
import pytest

from siv_photophysics.correlation import (
    BLEACHED,
    BLINKING,
    STABLE,
    bin_timetrace,
    correlate,
    detect_intermittence,
    tail_level,
)
from siv_photophysics.emitter import SimConfig, TimestampStream, simulate
from siv_photophysics.errors import DegenerateTrace, EmptyChannel, InvalidParameters
from siv_photophysics.rate_model import g2_analytic, shape_from_rates


def test_known_delays():
    """b-minus-a delays land in the bins centred on them."""
    a = np.array([10_000_000], dtype=np.int64)
    b = np.array([9_993_000, 10_003_000], dtype=np.int64)
    stream = TimestampStream(a, b, 20_000.0)
    hist = correlate(stream, max_tau=20.0, bin_width=1.0)

    assert hist.counts.size == 41
    assert hist.counts.sum() == 2
    assert hist.counts[np.isclose(hist.centers, 3.0)][0] == 1
    assert hist.counts[np.isclose(hist.centers, -7.0)][0] == 1
    assert hist.norm_constant == pytest.approx(1 * 2 * 1.0 / 20_000.0)


def test_bins_centred_on_multiples(uniform_stream):
    hist = correlate(uniform_stream, max_tau=100.0, bin_width=2.5)
    half = hist.counts.size // 2
    assert hist.centers[half] == pytest.approx(0.0)
    np.testing.assert_allclose(np.diff(hist.centers), 2.5)
    assert hist.bin_width == pytest.approx(2.5)


def test_uncorrelated_channels_are_flat(uniform_stream):
    hist = correlate(uniform_stream, max_tau=1000.0, bin_width=10.0)
    level, err = tail_level(hist)
    assert level == pytest.approx(1.0, abs=5 * err)
    assert hist.normalized.mean() == pytest.approx(1.0, abs=0.1)


def test_parallel_blocks_match_serial(uniform_stream):
    serial = correlate(uniform_stream, max_tau=500.0, bin_width=5.0, jobs=1)
    threaded = correlate(uniform_stream, max_tau=500.0, bin_width=5.0, jobs=4)
    np.testing.assert_array_equal(serial.counts, threaded.counts)


def test_simulated_antibunching(nd3_rates):
    cfg = SimConfig(rc=nd3_rates, power=100.0, duration=0.1, eta_detect=0.01, seed=21)
    hist = correlate(simulate(cfg), max_tau=250.0, bin_width=0.25)
    centre = int(np.argmin(np.abs(hist.centers)))
    assert hist.normalized[centre] < 0.5
    level, _ = tail_level(hist)
    assert level == pytest.approx(1.0, abs=0.1)
    assert hist.normalized.max() > 1.3


def test_simulated_histogram_follows_the_rate_model(nd3_rates):
    """Pearson chi-square of the simulated coincidences against the model expectation."""
    cfg = SimConfig(rc=nd3_rates, power=100.0, duration=0.1, eta_detect=0.01, seed=21)
    hist = correlate(simulate(cfg), max_tau=250.0, bin_width=0.25)
    shape = shape_from_rates(nd3_rates, 100.0)
    # model averaged over each bin
    offsets = (np.arange(8) + 0.5) / 8 - 0.5
    model = g2_analytic(shape, hist.centers[:, None] + offsets * hist.bin_width).mean(axis=1)
    expected = hist.norm_constant * model
    keep = expected >= 5.0
    chi2 = np.sum((hist.counts[keep] - expected[keep]) ** 2 / expected[keep])
    assert chi2 / keep.sum() < 1.2
    assert keep.sum() > 1900


def test_swapping_channels_mirrors_the_histogram(uniform_stream):
    swapped = TimestampStream(uniform_stream.channel_b, uniform_stream.channel_a, 1e10)
    # edges never fall on whole picoseconds
    forward = correlate(uniform_stream, max_tau=100.0, bin_width=2.5003)
    backward = correlate(swapped, max_tau=100.0, bin_width=2.5003)
    np.testing.assert_array_equal(backward.counts, forward.counts[::-1])
    assert backward.norm_constant == pytest.approx(forward.norm_constant)


def test_background_only_stream_is_uncorrelated(nd3_rates):
    cfg = SimConfig(
        rc=nd3_rates, power=100.0, duration=0.1, eta_detect=0.0, background_rate=1e6, seed=3
    )
    hist = correlate(simulate(cfg), max_tau=1000.0, bin_width=10.0)
    assert hist.normalized.mean() == pytest.approx(1.0, abs=0.03)
    level, err = tail_level(hist)
    assert level == pytest.approx(1.0, abs=5 * err)
    centre = int(np.argmin(np.abs(hist.centers)))
    assert hist.normalized[centre] == pytest.approx(1.0, abs=0.3)


def test_empty_channel():
    stream = TimestampStream(np.array([1, 2], dtype=np.int64), np.empty(0, dtype=np.int64), 10.0)
    with pytest.raises(EmptyChannel):
        correlate(stream, max_tau=10.0, bin_width=1.0)


def test_window_must_span_ten_bins(uniform_stream):
    with pytest.raises(InvalidParameters):
        correlate(uniform_stream, max_tau=5.0, bin_width=1.0)
    with pytest.raises(InvalidParameters):
        correlate(uniform_stream, max_tau=5.0, bin_width=0.0)


def _stream_with_gap(gap_start_s, gap_stop_s, rate=10_000, duration_s=10.0, seed=0):
    rng = np.random.default_rng(seed)
    n = int(rate * duration_s)
    ticks = np.unique(rng.integers(0, int(duration_s * 1e12), n))
    inside = (ticks >= gap_start_s * 1e12) & (ticks < gap_stop_s * 1e12)
    ticks = ticks[~inside]
    return TimestampStream(ticks[::2], ticks[1::2], duration_s * 1e9)


def test_timetrace_rates(uniform_stream):
    trace = bin_timetrace(uniform_stream, 100.0)
    assert trace.rates.size == 100
    assert trace.rates.mean() == pytest.approx(20_000, rel=0.01)
    assert trace.times[1] == pytest.approx(100.0)


def test_stable_trace(uniform_stream):
    report = detect_intermittence(bin_timetrace(uniform_stream, 100.0))
    assert report.classification == STABLE
    assert report.dark_intervals == []


def test_blinking_trace():
    trace = bin_timetrace(_stream_with_gap(4.0, 6.0), 100.0)
    report = detect_intermittence(trace, min_dark=200.0)
    assert report.classification == BLINKING
    assert report.dark_intervals == [(4000.0, 6000.0)]


def test_bleached_trace():
    trace = bin_timetrace(_stream_with_gap(5.0, 10.0), 100.0)
    report = detect_intermittence(trace, min_dark=200.0)
    assert report.classification == BLEACHED


def test_short_dips_ignored():
    trace = bin_timetrace(_stream_with_gap(4.0, 4.1), 100.0)
    report = detect_intermittence(trace, min_dark=200.0)
    assert report.classification == STABLE


def test_empty_trace_is_degenerate():
    empty = np.empty(0, dtype=np.int64)
    trace = bin_timetrace(TimestampStream(empty, empty, 1e9), 100.0)
    with pytest.raises(DegenerateTrace):
        detect_intermittence(trace)
