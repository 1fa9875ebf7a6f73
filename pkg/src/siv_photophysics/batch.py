"""Emitter batteries: synthetic round trips over many catalog rows in parallel."""

import concurrent.futures
import logging
from typing import Any, Dict, List, Optional, Sequence

import click
import numpy as np

from .fitting import PowerSeries, fit_power_dependence, fit_saturation
from .formats import to_json
from .rate_model import saturation_curve
from .sweep import PowerSweep, point_seed
from .tables import DEFAULT_PSAT, EmitterRecord

logger = logging.getLogger(__name__)

# relative tolerances of the recovered coefficients
ROUND_TRIP_TOLERANCES: Dict[str, float] = {
    "k21": 0.10,
    "sigma": 0.10,
    "k23": 0.20,
    "d": 0.20,
    "k31_0": 0.30,
    "c": 0.50,
}

POWER_SPAN = (0.05, 10.0)


def sweep_powers(psat: float, n_powers: int = 8) -> np.ndarray:
    """Log-spaced powers from 0.05 to 10 times psat."""
    return np.geomspace(POWER_SPAN[0], POWER_SPAN[1], n_powers) * psat


def round_trip(
    record: EmitterRecord,
    photons: float = 1e7,
    n_powers: int = 8,
    seed: int = 0,
    irf_sigma: float = 0.0,
    jobs: int = 1,
    quiet: bool = True,
) -> Dict[str, Any]:
    """
    Simulate, correlate and fit one emitter, then compare the recovered
    coefficients with the ones it was simulated from.

    Returns:
        Dictionary with recovered and true rates, relative errors, the
        tolerance verdict and fit flags
    """
    truth = record.rates
    powers = sweep_powers(record.psat or DEFAULT_PSAT, n_powers)
    sweep = PowerSweep(
        truth,
        powers,
        photons=photons,
        irf_sigma=irf_sigma,
        seed=seed,
        jobs=jobs,
        name=record.name,
        quiet=quiet,
    )
    series_a, series_tau1, series_tau2 = sweep.run().series()
    fit = fit_power_dependence(series_a, series_tau1, series_tau2)

    recovered = fit.rates
    errors = {
        name: abs(getattr(recovered, name) / getattr(truth, name) - 1.0)
        for name in ROUND_TRIP_TOLERANCES
        if getattr(truth, name) > 0
    }
    within = all(errors[name] <= ROUND_TRIP_TOLERANCES[name] for name in errors)
    return {
        "rates": recovered.to_dict(),
        "truth": truth.to_dict(),
        "relative_errors": errors,
        "within_tolerance": within,
        "flags": list(fit.flags),
        "limits": fit.limits.to_dict(),
    }


def round_trip_single(
    record: EmitterRecord,
    photons: float,
    n_powers: int,
    seed: int,
    irf_sigma: float,
    jobs: int,
    quiet: bool = False,
) -> Dict[str, Any]:
    """Run one round trip and return a result dict that never raises."""
    result: Dict[str, Any] = {
        "name": record.name,
        "success": False,
        "error": None,
        "result": None,
    }
    try:
        if not quiet:
            click.echo(f"[{record.name}] Starting round trip...", err=True)
        result["result"] = round_trip(record, photons, n_powers, seed, irf_sigma, jobs)
        result["success"] = True
    except Exception as e:
        result["error"] = str(e)
        logger.debug("Round trip of %s failed", record.name, exc_info=True)
    return result


def run_battery(
    records: Sequence[EmitterRecord],
    photons: float = 1e7,
    n_powers: int = 8,
    seed: int = 0,
    irf_sigma: float = 0.0,
    max_workers: int = 1,
    quiet: bool = False,
) -> List[Dict[str, Any]]:
    """
    Round-trip several emitters in parallel.

    Args:
        records: Catalog rows with fitted power dependence
        photons: Detected photons per power point
        n_powers: Power points per emitter
        seed: Base seed; each emitter derives its own
        irf_sigma: Instrument response width in ns
        max_workers: Maximum parallel workers
        quiet: Suppress progress messages

    Returns:
        List of results in catalog order
    """
    if not quiet:
        click.echo(f"Round-tripping {len(records)} emitter(s)...\n", err=True)

    order = {record.name: i for i, record in enumerate(records)}
    results = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_record = {
            executor.submit(
                round_trip_single,
                record,
                photons,
                n_powers,
                point_seed(seed, order[record.name]),
                irf_sigma,
                1,
                quiet,
            ): record
            for record in records
        }

        for future in concurrent.futures.as_completed(future_to_record):
            result = future.result()
            results.append(result)

            if not quiet:
                if result["success"]:
                    click.echo(f"[{result['name']}] ✓ Complete", err=True)
                else:
                    click.echo(f"[{result['name']}] ✗ Failed: {result['error']}", err=True)

    return sorted(results, key=lambda r: order[r["name"]])


def saturation_battery(
    records: Sequence[EmitterRecord],
    c_backgr: float = 50.0,
    integration: float = 1.0,
    n_powers: int = 12,
    seed: int = 0,
) -> Dict[str, Any]:
    """
    Fit synthetic saturation curves built from each record's I∞ and Psat.

    Count rates carry Poisson noise for the given integration time (s).

    Returns:
        Per-emitter fitted I∞ and Psat plus their mean I∞ (cps)
    """
    rng = np.random.default_rng(seed)
    rows = []
    for record in records:
        if not np.isfinite(record.i_inf):
            continue
        psat = record.psat or DEFAULT_PSAT
        powers = np.geomspace(0.1, 10.0, n_powers) * psat
        rate = np.asarray(saturation_curve(record.i_inf * 1e6, psat, c_backgr, powers))
        counts = rng.poisson(rate * integration)
        series = PowerSeries(
            powers,
            counts / integration,
            np.sqrt(np.maximum(counts, 1)) / integration,
            quantity="rate_cps",
        )
        fit = fit_saturation(series)
        rows.append(
            {
                "name": record.name,
                "I_inf": fit.parameters["I_inf"],
                "Psat": fit.parameters["Psat"],
                "I_inf_table": record.i_inf * 1e6,
            }
        )
    mean = float(np.mean([r["I_inf"] for r in rows])) if rows else float("nan")
    return {"emitters": rows, "mean_I_inf": mean}


def format_battery_output(results: List[Dict[str, Any]], output_format: str = "text") -> str:
    """
    Format battery results for display.

    Args:
        results: List of emitter results
        output_format: "text" or "structured"

    Returns:
        Formatted output string
    """
    if output_format.lower() == "structured":
        return to_json(results)

    lines = ["=== Round-Trip Battery ===\n"]

    successful = [r for r in results if r["success"]]
    failed = [r for r in results if not r["success"]]
    within = [r for r in successful if r["result"]["within_tolerance"]]

    lines.append(
        f"Total: {len(results)} | Success: {len(successful)} | Failed: {len(failed)} "
        f"| Within tolerance: {len(within)}\n"
    )

    if failed:
        lines.append("Failed Emitters:")
        for r in failed:
            lines.append(f"  {r['name']}: {r['error']}")
        lines.append("")

    for result in successful:
        data = result["result"]
        verdict = "within tolerance" if data["within_tolerance"] else "OUT OF TOLERANCE"
        lines.append(f"--- {result['name']} ({verdict}) ---")
        for name, error in data["relative_errors"].items():
            tol = ROUND_TRIP_TOLERANCES[name]
            lines.append(
                f"  {name}: {data['rates'][name]:.4g} (true {data['truth'][name]:.4g}, "
                f"error {error:.1%}, tolerance {tol:.0%})"
            )
        if data["flags"]:
            lines.append(f"  Flags: {', '.join(data['flags'])}")
        lines.append("")

    return "\n".join(lines)


def passed(results: List[Dict[str, Any]], names: Optional[Sequence[str]] = None) -> bool:
    """True when every (selected) emitter ran and landed within tolerance."""
    selected = [r for r in results if names is None or r["name"] in names]
    return bool(selected) and all(
        r["success"] and r["result"]["within_tolerance"] for r in selected
    )
