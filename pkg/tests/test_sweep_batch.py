"""Tests for power sweeps and emitter batteries."""

import math

import numpy as np
import pytest

from siv_photophysics.batch import (
    format_battery_output,
    passed,
    run_battery,
    saturation_battery,
    sweep_powers,
)
from siv_photophysics.emitter import expected_count_rate
from siv_photophysics.errors import InvalidParameters
from siv_photophysics.sweep import (
    MAX_HALF_BINS,
    PowerSweep,
    SweepResult,
    histogram_window,
    point_seed,
)
from siv_photophysics.tables import CATALOG, get_record


def test_histogram_window():
    max_tau, bin_width = histogram_window(1.0, 40.0)
    assert max_tau == pytest.approx(240.0)
    assert bin_width == pytest.approx(0.1)


def test_histogram_window_caps_bin_count():
    max_tau, bin_width = histogram_window(0.01, 1000.0)
    assert max_tau / bin_width == pytest.approx(MAX_HALF_BINS)


def test_histogram_window_without_bunching():
    max_tau, _ = histogram_window(2.0, math.inf)
    assert max_tau == pytest.approx(600.0)


def test_point_seed():
    assert point_seed(3, 0) == point_seed(3, 0)
    seeds = {point_seed(3, i) for i in range(10)}
    assert len(seeds) == 10
    assert point_seed(4, 0) not in seeds


def test_sweep_config_matches_photon_budget(nd3_rates):
    sweep = PowerSweep(nd3_rates, [200.0, 20.0], photons=1e5, seed=2, quiet=True)
    assert sweep.powers == [20.0, 200.0]
    for index in range(2):
        cfg = sweep.config(index)
        assert cfg.duration * expected_count_rate(cfg) == pytest.approx(1e5)
        assert cfg.seed == point_seed(2, index)
    assert sweep.pe(0) == pytest.approx(1.0)


def test_sweep_validation(nd3_rates):
    with pytest.raises(InvalidParameters):
        PowerSweep(nd3_rates, [1.0], photons=0)
    with pytest.raises(InvalidParameters):
        PowerSweep(get_record("ND5").rates, [1.0])


def test_small_sweep(nd3_rates):
    sweep = PowerSweep(nd3_rates, [50.0, 300.0], photons=1e5, seed=1, quiet=True)
    result = sweep.run()
    assert len(result.points) == 2
    assert not result.interrupted
    assert all(point.events > 0 for point in result.points)
    assert [point.power for point in result.points] == [50.0, 300.0]
    assert result.to_dict()["points"][0]["power"] == 50.0


def test_empty_sweep_has_no_series():
    with pytest.raises(InvalidParameters):
        SweepResult().series()


def test_sweep_powers():
    powers = sweep_powers(100.0, 5)
    assert powers[0] == pytest.approx(5.0)
    assert powers[-1] == pytest.approx(1000.0)
    np.testing.assert_allclose(np.diff(np.log(powers)), np.log(200.0) / 4)


def test_saturation_battery_mean():
    result = saturation_battery(CATALOG, seed=3)
    assert len(result["emitters"]) == len(CATALOG)
    assert result["mean_I_inf"] == pytest.approx(1.5e6, abs=0.25e6)
    nd3 = next(row for row in result["emitters"] if row["name"] == "ND3")
    assert nd3["I_inf"] == pytest.approx(2.46e6, rel=0.02)


def _fabricated_results():
    good = {
        "rates": {"k21": 770.0, "sigma": 5.7},
        "truth": {"k21": 771.0, "sigma": 5.7},
        "relative_errors": {"k21": 0.0013, "sigma": 0.0},
        "within_tolerance": True,
        "flags": [],
        "limits": {},
    }
    return [
        {"name": "ND2", "success": True, "error": None, "result": good},
        {"name": "ND3", "success": False, "error": "boom", "result": None},
    ]


def test_format_battery_output_text():
    text = format_battery_output(_fabricated_results())
    assert "Total: 2 | Success: 1 | Failed: 1 | Within tolerance: 1" in text
    assert "  ND3: boom" in text
    assert "--- ND2 (within tolerance) ---" in text
    assert "k21: 770 (true 771" in text


def test_format_battery_output_structured():
    assert format_battery_output(_fabricated_results(), "structured").startswith("[")


def test_passed():
    results = _fabricated_results()
    assert passed(results, ["ND2"])
    assert not passed(results)
    assert not passed(results, ["NI7"])


@pytest.mark.slow
def test_run_battery_recovers_reference_emitters():
    names = ["ND2", "ND3", "NI7"]
    results = run_battery([get_record(n) for n in names], photons=1e7, max_workers=3, quiet=True)
    for result in results:
        assert result["success"], result["error"]
    assert passed(results, names)
