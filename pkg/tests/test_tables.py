"""Tests for the emitter catalog and the table reproduction checks."""

import math

import numpy as np
import pytest

from siv_photophysics.errors import FileFormatError
from siv_photophysics.rate_model import steady_state
from siv_photophysics.tables import (
    CATALOG,
    DIPOLE_BAND_TOLERANCE,
    NI_WAVELENGTH,
    band_spread_check,
    check_calibration,
    check_dipole,
    check_model_contrast,
    check_quantum_efficiency,
    check_steady_state,
    format_check_output,
    get_record,
    load_catalog_from_csv,
    tau2_contrast,
)


def test_catalog_names_unique():
    names = [r.name for r in CATALOG]
    assert len(names) == len(set(names)) == 14


def test_get_record():
    assert get_record("nd3").name == "ND3"
    assert get_record("NI7").wavelength == NI_WAVELENGTH
    with pytest.raises(KeyError):
        get_record("ND99")


def test_power_dependence_rows():
    fitted = [r.name for r in CATALOG if r.has_power_dependence]
    assert fitted == ["ND1", "ND2", "ND3", "ND4", "NI1", "NI7"]
    assert get_record("ND5").rates.sigma == 0.0


def test_steady_state_reproduces_catalog():
    rows = check_steady_state()
    assert len(rows) == len(CATALOG)
    assert all(row["success"] for row in rows), [r for r in rows if not r["success"]]


def test_quantum_efficiency_reproduces_catalog():
    rows = check_quantum_efficiency()
    assert all(row["success"] for row in rows), [r for r in rows if not r["success"]]


def test_model_contrast():
    rows = check_model_contrast()
    assert [row["name"] for row in rows] == ["ND1", "ND2", "ND3", "ND4", "NI1"]
    assert all(row["success"] for row in rows)


def test_contrast_needs_power_dependence():
    with pytest.raises(KeyError):
        tau2_contrast(get_record("ND5"))


def test_calibration():
    rows = check_calibration()
    assert len(rows) == 4
    assert all(row["success"] for row in rows), rows


def test_load_catalog_from_csv(tmp_path):
    path = tmp_path / "catalog.csv"
    path.write_text(
        "name,k21,k23,k31_0,d,sigma,c,psat,i_inf\n"
        "A1,3424,24.6,1.7,24.4,8.9,177,167,1.53\n"
        "A2,1638,1.5,0.16,0.7,,,,0.34\n"
    )
    records = load_catalog_from_csv(str(path))
    assert [r.name for r in records] == ["A1", "A2"]
    assert records[0].has_power_dependence
    assert not records[1].has_power_dependence
    assert records[0].n2_inf == pytest.approx(steady_state(records[0].rates, math.inf).n2)
    assert math.isnan(records[1].eta_qe_parallel)


def test_load_catalog_missing_column(tmp_path):
    path = tmp_path / "catalog.csv"
    path.write_text("name,k21,k23\nA1,1,2\n")
    with pytest.raises(FileFormatError) as exc:
        load_catalog_from_csv(str(path))
    assert "k31_0" in str(exc.value)


def test_load_catalog_bad_value(tmp_path):
    path = tmp_path / "catalog.csv"
    path.write_text("name,k21,k23,k31_0,d\nA1,fast,2,1,1\n")
    with pytest.raises(FileFormatError):
        load_catalog_from_csv(str(path))


def test_load_catalog_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_catalog_from_csv(str(tmp_path / "missing.csv"))


def test_format_check_output():
    text = format_check_output(
        "Demo",
        [
            {"name": "ok", "value": 1.23456, "success": True},
            {"name": "bad", "value": 2.0, "success": False},
        ],
    )
    assert text.startswith("--- Demo (1/2 passed) ---")
    assert "  ✓ ok: value=1.235" in text
    assert "  ✗ bad: value=2" in text


def test_band_spread_names_its_widened_tolerance():
    heights = np.array([20.0, 40.0, 70.0, 100.0, 150.0])
    row = band_spread_check("perpendicular", heights, np.array([0.1, 0.25, 0.28, 0.31, 0.5]))
    assert row["value"] == pytest.approx(0.06 / 0.56)
    assert row["success"]
    assert row["tolerance"] == DIPOLE_BAND_TOLERANCE == 0.12
    text = format_check_output("Dipole", [row])
    assert "tolerance=0.12" in text
    assert "widened from the stated < 10%" in text

    wide = band_spread_check("parallel", heights, np.array([0.1, 0.2, 0.28, 0.36, 0.5]))
    assert not wide["success"]


@pytest.mark.slow
def test_dipole_checks():
    rows = check_dipole(jobs=2)
    assert all(row["success"] for row in rows), [r for r in rows if not r["success"]]
