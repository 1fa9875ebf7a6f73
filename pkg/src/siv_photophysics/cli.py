"""CLI interface for SiV photophysics: simulate, correlate, fit and reproduce."""

import functools
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import click
import numpy as np

from . import __version__
from .batch import format_battery_output, passed, run_battery, saturation_battery
from .correlation import bin_timetrace, correlate, detect_intermittence, tail_level
from .dipole import (
    IRIDIUM_EPSILON,
    ORIENTATIONS,
    SIV_WAVELENGTH,
    DipoleEnvironment,
    collection_efficiency,
    far_field_collection_limit,
    free_space_collection_efficiency,
    radiation_pattern,
    sweep_heights,
)
from .emitter import (
    SimConfig,
    TimestampStream,
    expected_count_rate,
    occupation_fractions,
    simulate,
)
from .errors import InputError, SivError, StorageError
from .fitting import (
    BUNCHING_UNRESOLVED,
    FitResult,
    PowerDependenceFit,
    constant_rate_prediction,
    estimate_quantum_efficiency,
    fit_g2,
    fit_power_dependence,
    fit_saturation,
    predict_curves,
    series_from_fits,
    signal_fraction,
)
from .formats import (
    histogram_columns,
    provenance,
    read_g2_series,
    read_histogram,
    read_rate_series,
    read_timestamps,
    render,
    write_table,
    write_timestamps,
)
from .rate_model import (
    LimitingValues,
    RateCoefficients,
    constant_rate_coefficients,
    shape_from_rates,
    steady_state,
)
from .sweep import histogram_window
from .tables import (
    CATALOG,
    DEFAULT_PSAT,
    EmitterRecord,
    check_calibration,
    check_dipole,
    check_model_contrast,
    check_quantum_efficiency,
    check_steady_state,
    format_check_output,
    get_record,
    load_catalog_from_csv,
)

logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Any])

BATTERY_EMITTERS = "ND2,ND3,NI7"


@dataclass
class Settings:
    """Group-level settings shared by every subcommand."""

    output_dir: Optional[str] = None
    verbose: int = 0


class ComplexParamType(click.ParamType):
    """Complex permittivity given as '-18+25j', '-18+25i' or '-18,25'."""

    name = "complex"

    def convert(
        self, value: Any, param: Optional[click.Parameter], ctx: Optional[click.Context]
    ) -> complex:
        if isinstance(value, complex):
            return value
        if isinstance(value, (list, tuple)) and len(value) == 2:
            return complex(float(value[0]), float(value[1]))
        text = str(value).strip().lower().replace(" ", "").replace("i", "j")
        try:
            if "," in text:
                real, imag = text.split(",")
                return complex(float(real), float(imag))
            return complex(text)
        except ValueError:
            self.fail(
                f"Invalid permittivity: '{value}'. Use forms like: -18+25j, -18,25", param, ctx
            )


def parse_float_list(text: str) -> List[float]:
    """
    Parse a list of numbers.

    Args:
        text: Comma-separated values ("10,20,40") or an inclusive range
            "start:stop:step" ("5:300:5")

    Examples:
        "1,2.5,10" -> [1.0, 2.5, 10.0]
        "10:30:10" -> [10.0, 20.0, 30.0]
    """
    text = str(text).strip()
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [start + i * step for i in range(n)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(
            f"Invalid list: '{text}'. Use formats like: 10,20,40 or 5:300:5"
        ) from None


def setup_logging(verbose: int) -> None:
    level = logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def handle_errors(func: F) -> F:
    """Map toolkit errors to exit codes: input 2, convergence 3, storage 4, other 1."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except (click.exceptions.ClickException, click.exceptions.Abort, click.exceptions.Exit):
            raise
        except SivError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
        except OSError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(StorageError.exit_code)
        except Exception as e:
            logger.debug("Unhandled error", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            sys.exit(1)

    return wrapper  # type: ignore[return-value]


def report_options(func: F) -> F:
    func = click.option(
        "--no-timestamp",
        is_flag=True,
        help="Leave the creation timestamp out of every output",
    )(func)
    func = click.option(
        "--quiet",
        "-q",
        is_flag=True,
        help="Suppress progress messages (errors and final report still shown)",
    )(func)
    func = click.option(
        "--output",
        type=click.Path(dir_okay=False),
        metavar="FILENAME",
        help="Save report to file (extension added automatically: .txt or .json)",
    )(func)
    func = click.option(
        "--format",
        "output_format",
        type=click.Choice(["text", "structured"], case_sensitive=False),
        default="text",
        help="Report format (structured = JSON)",
    )(func)
    return func


def seed_option(func: F) -> F:
    return click.option(
        "--seed",
        type=click.IntRange(min=0),
        default=0,
        envvar="SIV_SEED",
        show_default=True,
        help="Random seed",
    )(func)


def jobs_option(func: F) -> F:
    return click.option(
        "--jobs",
        type=click.IntRange(min=1),
        default=1,
        envvar="SIV_JOBS",
        show_default=True,
        help="Worker threads for simulation, correlation and sweeps",
    )(func)


def rate_options(func: F) -> F:
    for name, unit in reversed(
        (
            ("k21", "MHz"),
            ("k23", "MHz"),
            ("k31-0", "MHz"),
            ("d", "MHz"),
            ("c", "µW"),
            ("sigma", "MHz/µW"),
        )
    ):
        func = click.option(f"--{name}", type=float, help=f"Override {name} ({unit})")(func)
    func = click.option(
        "--catalog",
        type=click.Path(exists=True, dir_okay=False),
        metavar="CSV_FILE",
        help="CSV emitter catalog (columns: name,k21,k23,k31_0,d,...)",
    )(func)
    func = click.option(
        "--emitter",
        default="ND3",
        show_default=True,
        help="Catalog emitter supplying the default rate coefficients",
    )(func)
    return func


def resolve_rates(
    emitter: str,
    catalog: Optional[str],
    overrides: Dict[str, Optional[float]],
) -> Tuple[RateCoefficients, EmitterRecord]:
    """Catalog rates for the emitter with individual coefficients overridden."""
    records: Sequence[EmitterRecord] = load_catalog_from_csv(catalog) if catalog else CATALOG
    try:
        record = get_record(emitter, records)
    except KeyError as e:
        raise click.BadParameter(str(e.args[0]), param_hint="--emitter") from None
    changes = {name: value for name, value in overrides.items() if value is not None}
    return record.rates.with_updates(**changes), record


def require_pump(
    rc: RateCoefficients, record: EmitterRecord, c_override: Optional[float]
) -> None:
    """Reject rates that cannot drive the emitter: sigma must be > 0 and c known when d > 0."""
    if rc.sigma <= 0 or (rc.d > 0 and record.c is None and c_override is None):
        raise click.BadParameter(
            f"{record.name} has no fitted pump slope or de-shelving saturation power; "
            "give --sigma and --c",
            param_hint="--emitter",
        )


def resolve_path(ctx: click.Context, path: str) -> Path:
    """Relative paths land in the configured output directory."""
    target = Path(path)
    settings: Settings = ctx.find_object(Settings) or Settings()
    if settings.output_dir and not target.is_absolute():
        target = Path(settings.output_dir) / target
        target.parent.mkdir(parents=True, exist_ok=True)
    return target


def emit_report(
    ctx: click.Context,
    report: Dict[str, Any],
    title: str,
    output_format: str,
    output: Optional[str],
    quiet: bool,
    text: Optional[str] = None,
) -> None:
    """Print the report and optionally save it."""
    if text is None or output_format.lower() == "structured":
        output_text = render(report, output_format, title)
    else:
        output_text = text

    if output:
        output_file = output
        if not output_file.endswith((".txt", ".json")):
            ext = ".json" if output_format.lower() == "structured" else ".txt"
            output_file = f"{output_file}{ext}"
        path = resolve_path(ctx, output_file)
        with open(path, "w") as f:
            f.write(output_text)
        if not quiet:
            click.echo(f"Report saved to: {path}", err=True)

    click.echo(output_text.rstrip("\n"))


def run_provenance(ctx: click.Context, seed: Optional[int], no_timestamp: bool) -> Dict[str, Any]:
    config = {"command": ctx.info_name, **ctx.params}
    return provenance(config, seed, timestamp=not no_timestamp)


@click.group()
@click.option(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False),
    metavar="JSON_FILE",
    help="JSON file of option defaults keyed by subcommand name; flags win",
)
@click.option(
    "--output-dir",
    envvar="SIV_OUTPUT_DIR",
    type=click.Path(file_okay=False),
    help="Directory for relative output paths",
)
@click.option("--verbose", "-v", count=True, help="Log progress (-v info, -vv debug)")
@click.version_option(version=__version__, prog_name="siv-photophysics")
@click.pass_context
def main(
    ctx: click.Context, config_file: Optional[str], output_dir: Optional[str], verbose: int
) -> None:
    """Model, simulate and fit the photophysics of single SiV centers."""
    setup_logging(verbose)
    ctx.obj = Settings(output_dir=output_dir, verbose=verbose)
    if config_file:
        try:
            with open(config_file, "r") as f:
                defaults = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise click.BadParameter(f"cannot read config: {e}", param_hint="--config") from None
        sections = defaults.values() if isinstance(defaults, dict) else ()
        if not isinstance(defaults, dict) or not all(isinstance(v, dict) for v in sections):
            raise click.BadParameter(
                "config must map subcommand names to option objects", param_hint="--config"
            )
        ctx.default_map = defaults


@main.command("simulate")
@click.argument("destination", metavar="OUTPUT", type=click.Path(dir_okay=False))
@rate_options
@click.option("--power", type=float, help="Excitation power in µW (default: the emitter's Psat)")
@click.option("--duration", type=float, default=1.0, show_default=True, help="Acquisition in s")
@click.option(
    "--eta-detect", type=float, default=0.01, show_default=True, help="Detection efficiency"
)
@click.option("--background", type=float, default=0.0, show_default=True, help="Background cps")
@click.option("--irf", type=float, default=0.0, show_default=True, help="IRF sigma in ns")
@click.option("--dead-time", type=float, default=0.0, show_default=True, help="Dead time in ns")
@click.option(
    "--splitter", type=float, default=0.5, show_default=True, help="Fraction routed to channel a"
)
@seed_option
@jobs_option
@report_options
@click.pass_context
@handle_errors
def simulate_cmd(
    ctx: click.Context,
    destination: str,
    emitter: str,
    catalog: Optional[str],
    k21: Optional[float],
    k23: Optional[float],
    k31_0: Optional[float],
    d: Optional[float],
    c: Optional[float],
    sigma: Optional[float],
    power: Optional[float],
    duration: float,
    eta_detect: float,
    background: float,
    irf: float,
    dead_time: float,
    splitter: float,
    seed: int,
    jobs: int,
    output_format: str,
    output: Optional[str],
    quiet: bool,
    no_timestamp: bool,
) -> None:
    """Simulate a two-detector photon timestamp file."""
    rc, record = resolve_rates(
        emitter, catalog, {"k21": k21, "k23": k23, "k31_0": k31_0, "d": d, "c": c, "sigma": sigma}
    )
    require_pump(rc, record, c)
    cfg = SimConfig(
        rc=rc,
        power=power if power is not None else (record.psat or DEFAULT_PSAT),
        duration=duration,
        eta_detect=eta_detect,
        background_rate=background,
        irf_sigma=irf,
        dead_time=dead_time,
        splitter_ratio=splitter,
        seed=seed,
    )
    if not quiet:
        click.echo(
            f"Simulating {cfg.duration:g} s at {cfg.power:.4g} µW "
            f"(expected {expected_count_rate(cfg):.4g} cps)...",
            err=True,
        )
    stream = simulate(cfg, jobs=jobs)

    meta = run_provenance(ctx, seed, no_timestamp)
    meta.update(source="simulation", config=cfg.to_dict(), emitter=record.name)
    path = resolve_path(ctx, destination)
    write_timestamps(path, stream, meta)

    report: Dict[str, Any] = {
        "provenance": meta,
        "file": str(path),
        "events_a": int(stream.channel_a.size),
        "events_b": int(stream.channel_b.size),
        "count_rate_cps": stream.n_events / cfg.duration if cfg.duration > 0 else 0.0,
        "expected_count_rate_cps": expected_count_rate(cfg),
    }
    if stream.level_times is not None and len(stream.level_times):
        occ = occupation_fractions(stream)
        report["occupation"] = {"fractions": occ.fractions, "stderr": occ.stderr}
    emit_report(ctx, report, "Simulation", output_format, output, quiet)


def default_window(stream: TimestampStream) -> Tuple[float, float]:
    """(max_tau, bin_width) from the simulated emitter recorded in the file metadata."""
    config = stream.metadata.get("config", {})
    if "rc" not in config or "power" not in config:
        raise click.UsageError(
            "the timestamp file does not describe its emitter; give --max-tau and --bin-width"
        )
    shape = shape_from_rates(RateCoefficients(**config["rc"]), float(config["power"]))
    return histogram_window(shape.tau1, shape.tau2)


@main.command("correlate")
@click.argument("source", metavar="INPUT", type=click.Path(exists=True, dir_okay=False))
@click.argument("destination", metavar="OUTPUT", type=click.Path(dir_okay=False))
@click.option("--max-tau", type=float, help="Largest delay in ns")
@click.option("--bin-width", type=float, help="Bin width in ns")
@jobs_option
@report_options
@click.pass_context
@handle_errors
def correlate_cmd(
    ctx: click.Context,
    source: str,
    destination: str,
    max_tau: Optional[float],
    bin_width: Optional[float],
    jobs: int,
    output_format: str,
    output: Optional[str],
    quiet: bool,
    no_timestamp: bool,
) -> None:
    """Build the g² coincidence histogram of a timestamp file."""
    stream = read_timestamps(source)
    if max_tau is None or bin_width is None:
        window = default_window(stream)
        max_tau = max_tau if max_tau is not None else window[0]
        bin_width = bin_width if bin_width is not None else window[1]
    hist = correlate(stream, max_tau, bin_width, jobs=jobs)
    tail, tail_err = tail_level(hist)

    meta = run_provenance(ctx, None, no_timestamp)
    meta.update(hist.metadata)
    meta.update(norm_constant=hist.norm_constant, tail_level=tail, tail_level_err=tail_err)
    path = resolve_path(ctx, destination)
    write_table(path, histogram_columns(hist), "g2-histogram", meta)

    centre = int(np.argmin(np.abs(hist.centers)))
    report = {
        "provenance": meta,
        "file": str(path),
        "bins": int(hist.counts.size),
        "pairs": int(hist.metadata["pairs"]),
        "g2_0": float(hist.normalized[centre]),
    }
    emit_report(ctx, report, "Correlation", output_format, output, quiet)


@main.command("trace")
@click.argument("source", metavar="INPUT", type=click.Path(exists=True, dir_okay=False))
@click.argument("destination", metavar="[OUTPUT]", type=click.Path(dir_okay=False), required=False)
@click.option("--window", type=float, default=100.0, show_default=True, help="Window in ms")
@click.option(
    "--threshold", type=float, default=0.3, show_default=True, help="Dark level / bright level"
)
@click.option("--min-dark", type=float, default=200.0, show_default=True, help="Shortest dark ms")
@click.option("--floor", type=float, default=0.0, show_default=True, help="Empty-trace cps")
@report_options
@click.pass_context
@handle_errors
def trace_cmd(
    ctx: click.Context,
    source: str,
    destination: Optional[str],
    window: float,
    threshold: float,
    min_dark: float,
    floor: float,
    output_format: str,
    output: Optional[str],
    quiet: bool,
    no_timestamp: bool,
) -> None:
    """Bin a fluorescence time trace and detect blinking or bleaching."""
    stream = read_timestamps(source)
    trace = bin_timetrace(stream, window)
    report_data = detect_intermittence(trace, threshold, min_dark, floor)

    meta = run_provenance(ctx, None, no_timestamp)
    report: Dict[str, Any] = {
        "provenance": meta,
        "windows": int(trace.rates.size),
        "mean_rate_cps": float(trace.rates.mean()) if trace.rates.size else 0.0,
        **report_data.to_dict(),
    }
    if destination:
        path = resolve_path(ctx, destination)
        write_table(path, {"time_ms": trace.times, "rate_cps": trace.rates}, "time-trace", meta)
        report["file"] = str(path)
    emit_report(ctx, report, "Time Trace", output_format, output, quiet)


def format_fit(fit: FitResult) -> Dict[str, Any]:
    """Parameters with uncertainties, flags and diagnostics of one fit."""
    return {
        "parameters": fit.parameters,
        "uncertainties": fit.uncertainties,
        "flags": fit.flags,
        "diagnostics": fit.diagnostics,
        "residual_norm": fit.residual_norm,
        "n_points": fit.n_points,
    }


@main.command("fit-g2")
@click.argument("source", metavar="HISTOGRAM", type=click.Path(exists=True, dir_okay=False))
@click.option("--pe", type=float, default=1.0, show_default=True, help="Emitter photon fraction")
@click.option("--irf", type=float, default=0.0, show_default=True, help="IRF sigma in ns")
@report_options
@click.pass_context
@handle_errors
def fit_g2_cmd(
    ctx: click.Context,
    source: str,
    pe: float,
    irf: float,
    output_format: str,
    output: Optional[str],
    quiet: bool,
    no_timestamp: bool,
) -> None:
    """Fit the three-level g² to a histogram file."""
    if not 0.0 < pe <= 1.0:
        raise click.BadParameter("must lie in (0, 1]", param_hint="--pe")
    fit = fit_g2(read_histogram(source), pe=pe, irf_sigma=irf)
    report = {"provenance": run_provenance(ctx, None, no_timestamp), **format_fit(fit)}
    emit_report(ctx, report, "g2 Fit", output_format, output, quiet)


@main.command("fit-sat")
@click.argument("source", metavar="SERIES", type=click.Path(exists=True, dir_okay=False))
@report_options
@click.pass_context
@handle_errors
def fit_sat_cmd(
    ctx: click.Context,
    source: str,
    output_format: str,
    output: Optional[str],
    quiet: bool,
    no_timestamp: bool,
) -> None:
    """Fit the saturation curve of a count-rate series (power_uw, rate_cps[, rate_err])."""
    data = read_rate_series(source)
    fit = fit_saturation(data)
    report = {
        "provenance": run_provenance(ctx, None, no_timestamp),
        **format_fit(fit),
        "pe": {f"{p:g}": float(v) for p, v in zip(data.powers, signal_fraction(fit, data.powers))},
    }
    emit_report(ctx, report, "Saturation Fit", output_format, output, quiet)


def limits_from_options(
    tau1_0: Optional[float],
    tau2_0: Optional[float],
    tau2_inf: Optional[float],
    a_inf: Optional[float],
) -> Optional[LimitingValues]:
    values = [v for v in (tau1_0, tau2_0, tau2_inf, a_inf) if v is not None]
    if not values:
        return None
    if len(values) < 4:
        raise click.UsageError("give all of --tau1-0, --tau2-0, --tau2-inf and --a-inf, or none")
    return LimitingValues(*(float(v) for v in values))


def limit_options(func: F) -> F:
    for name, help_text in reversed(
        (
            ("--tau1-0", "tau1 at vanishing power (ns)"),
            ("--tau2-0", "tau2 at vanishing power (ns)"),
            ("--tau2-inf", "tau2 at infinite power (ns)"),
            ("--a-inf", "a at infinite power"),
        )
    ):
        func = click.option(name, type=float, help=f"Limiting value: {help_text}")(func)
    return func


def power_fit_report(result: PowerDependenceFit) -> Dict[str, Any]:
    rc = result.rates
    return {
        "sigma": rc.sigma,
        "c": rc.c,
        "uncertainties": result.fit.uncertainties,
        "rates": rc.to_dict(),
        "limits": result.limits.to_dict(),
        "n2_inf": steady_state(rc, math.inf).n2,
        "refinements": result.refinements,
        "stage_rounds": result.fit.diagnostics["stage_rounds"],
        "flags": result.flags,
    }


def write_curves(
    ctx: click.Context,
    destination: str,
    rc: RateCoefficients,
    powers: np.ndarray,
    psat: Optional[float],
    meta: Dict[str, Any],
) -> Path:
    """Model a(P), tau1(P), tau2(P) with the constant-rate overlay when psat is known."""
    grid = np.geomspace(powers.min() / 10.0, powers.max() * 10.0, 200)
    model = predict_curves(rc, grid)
    columns = {
        "power_uw": grid,
        "a": model.a,
        "tau1_ns": model.tau1,
        "tau2_ns": model.tau2,
    }
    if psat is not None:
        const = constant_rate_coefficients(rc, psat)
        overlay = constant_rate_prediction(const.k21, const.k23, const.k31_0, const.sigma, grid)
        columns.update(a_const=overlay.a, tau1_const_ns=overlay.tau1, tau2_const_ns=overlay.tau2)
    path = resolve_path(ctx, destination)
    write_table(path, columns, "power-curves", meta)
    return path


@main.command("fit-power")
@click.argument("source", metavar="SERIES", type=click.Path(exists=True, dir_okay=False))
@limit_options
@click.option("--c0", type=float, help="Starting value for c (µW)")
@click.option(
    "--single-pass", is_flag=True, help="Fit sigma then c once instead of alternating the stages"
)
@click.option("--psat", type=float, help="Saturation power for the constant-rate overlay (µW)")
@click.option("--curves", type=click.Path(dir_okay=False), help="Write model curves to this file")
@report_options
@click.pass_context
@handle_errors
def fit_power_cmd(
    ctx: click.Context,
    source: str,
    tau1_0: Optional[float],
    tau2_0: Optional[float],
    tau2_inf: Optional[float],
    a_inf: Optional[float],
    c0: Optional[float],
    single_pass: bool,
    psat: Optional[float],
    curves: Optional[str],
    output_format: str,
    output: Optional[str],
    quiet: bool,
    no_timestamp: bool,
) -> None:
    """Staged fit of the de-shelving model to a g² series (power_uw, a, tau1_ns, tau2_ns)."""
    series_a, series_tau1, series_tau2 = read_g2_series(source)
    lv = limits_from_options(tau1_0, tau2_0, tau2_inf, a_inf)
    result = fit_power_dependence(
        series_a, series_tau1, series_tau2, lv=lv, c0=c0, single_pass=single_pass
    )

    meta = run_provenance(ctx, None, no_timestamp)
    report: Dict[str, Any] = {"provenance": meta, **power_fit_report(result)}
    if curves:
        path = write_curves(ctx, curves, result.rates, series_tau1.powers, psat, meta)
        report["curves"] = str(path)
    emit_report(ctx, report, "Power-Dependence Fit", output_format, output, quiet)


@main.command("qe")
@rate_options
@click.option("--i-inf", type=float, help="Saturated count rate in cps (default: catalog value)")
@click.option("--eta-det-int", type=float, default=0.25, show_default=True)
@click.option(
    "--eta-coll",
    type=float,
    multiple=True,
    help="Collection efficiency; repeat for several (default: 0.78 and 0.28)",
)
@report_options
@click.pass_context
@handle_errors
def qe_cmd(
    ctx: click.Context,
    emitter: str,
    catalog: Optional[str],
    k21: Optional[float],
    k23: Optional[float],
    k31_0: Optional[float],
    d: Optional[float],
    c: Optional[float],
    sigma: Optional[float],
    i_inf: Optional[float],
    eta_det_int: float,
    eta_coll: Tuple[float, ...],
    output_format: str,
    output: Optional[str],
    quiet: bool,
    no_timestamp: bool,
) -> None:
    """Quantum efficiency from the saturated count rate and the rate coefficients."""
    rc, record = resolve_rates(
        emitter, catalog, {"k21": k21, "k23": k23, "k31_0": k31_0, "d": d, "c": c, "sigma": sigma}
    )
    rate = i_inf if i_inf is not None else record.i_inf * 1e6
    if not math.isfinite(rate):
        raise click.UsageError(f"{record.name} has no saturated count rate; give --i-inf")
    efficiencies = eta_coll or (0.78, 0.28)
    report = {
        "provenance": run_provenance(ctx, None, no_timestamp),
        "emitter": record.name,
        "i_inf_cps": rate,
        "n2_inf": steady_state(rc, math.inf).n2,
        "eta_det_int": eta_det_int,
        "eta_qe": {
            f"{e:g}": estimate_quantum_efficiency(rate, rc, eta_det_int, e) for e in efficiencies
        },
    }
    emit_report(ctx, report, "Quantum Efficiency", output_format, output, quiet)


@main.command("dipole")
@click.option(
    "--heights",
    default="5:300:5",
    show_default=True,
    help="Heights in nm: list (10,20,40) or range (start:stop:step)",
)
@click.option(
    "--epsilon",
    type=ComplexParamType(),
    default=str(IRIDIUM_EPSILON).strip("()"),
    show_default=True,
    help="Substrate permittivity",
)
@click.option("--wavelength", type=float, default=SIV_WAVELENGTH, show_default=True, help="nm")
@click.option("--na", type=float, default=0.8, show_default=True, help="Numerical aperture")
@click.option("--eta0", type=float, default=0.05, show_default=True, help="Intrinsic yield")
@click.option(
    "--orientation",
    type=click.Choice(["both", *ORIENTATIONS]),
    default="both",
    show_default=True,
)
@click.option("--reference-height", type=float, default=75.0, show_default=True, help="nm")
@click.option(
    "--pattern-heights", default="80", show_default=True, help="Heights (nm) for pattern files"
)
@click.option(
    "--curves-dir",
    type=click.Path(file_okay=False),
    help="Directory for curve files (default: the output directory or .)",
)
@jobs_option
@report_options
@click.pass_context
@handle_errors
def dipole_cmd(
    ctx: click.Context,
    heights: str,
    epsilon: complex,
    wavelength: float,
    na: float,
    eta0: float,
    orientation: str,
    reference_height: float,
    pattern_heights: str,
    curves_dir: Optional[str],
    jobs: int,
    output_format: str,
    output: Optional[str],
    quiet: bool,
    no_timestamp: bool,
) -> None:
    """Decay rates, collection efficiency and effective yield of a dipole above a mirror."""
    grid = parse_float_list(heights)
    pattern_grid = parse_float_list(pattern_heights)
    orientations = ORIENTATIONS if orientation == "both" else (orientation,)
    directory = resolve_path(ctx, curves_dir or ".")
    directory.mkdir(parents=True, exist_ok=True)
    meta = run_provenance(ctx, None, no_timestamp)

    report: Dict[str, Any] = {"provenance": meta, "orientations": {}}
    for name in orientations:
        env = DipoleEnvironment(
            height_z=reference_height,
            wavelength=wavelength,
            epsilon_substrate=epsilon,
            orientation=name,
            na=na,
        )
        if not quiet:
            click.echo(f"[{name}] Sweeping {len(grid)} heights...", err=True)
        sweep = sweep_heights(env, grid, eta0=eta0, jobs=jobs)
        curve_path = directory / f"dipole_{name}.tsv"
        write_table(curve_path, sweep.columns(), "dipole-sweep", {**meta, "orientation": name})

        pattern_columns: Dict[str, Any] = {}
        free = radiation_pattern(
            DipoleEnvironment(height_z=reference_height, epsilon_substrate=1.0, orientation=name)
        )
        pattern_columns["theta_deg"] = np.degrees(free.theta)
        pattern_columns["free_space"] = free.intensity
        for z in pattern_grid:
            pattern = radiation_pattern(env.at_height(z))
            pattern_columns[f"z_{z:g}nm"] = pattern.intensity
        pattern_path = directory / f"pattern_{name}.tsv"
        write_table(
            pattern_path, pattern_columns, "radiation-pattern", {**meta, "orientation": name}
        )

        eta = np.asarray(sweep.eta)
        best = int(np.argmax(eta))
        report["orientations"][name] = {
            "eta_coll_reference": collection_efficiency(env),
            "eta_coll_far_field": far_field_collection_limit(env),
            "eta_coll_free_space_4pi": free_space_collection_efficiency(name, na),
            "max_gamma_r_rel": float(sweep.gamma_r_rel.max()),
            "max_eta": float(eta[best]),
            "max_eta_height_nm": float(sweep.heights[best]),
            "flags": sweep.flags,
            "curves": str(curve_path),
            "pattern": str(pattern_path),
        }
        if not quiet:
            click.echo(f"[{name}] ✓ Complete", err=True)
    emit_report(ctx, report, "Dipole Above Substrate", output_format, output, quiet)


def fit_stream(
    path: str,
    power: float,
    pe: float,
    irf: float,
    max_tau: Optional[float],
    bin_width: Optional[float],
) -> FitResult:
    stream = read_timestamps(path)
    if max_tau is None or bin_width is None:
        window = default_window(stream)
        max_tau = max_tau if max_tau is not None else window[0]
        bin_width = bin_width if bin_width is not None else window[1]
    hist = correlate(stream, max_tau, bin_width)
    fit = fit_g2(hist, pe=pe, irf_sigma=irf)
    fit.diagnostics["power"] = power
    return fit


def stream_power(path: str) -> float:
    stream_meta = read_timestamps(path).metadata
    try:
        return float(stream_meta["config"]["power"])
    except (KeyError, TypeError, ValueError):
        raise InputError(f"{path}: no excitation power in the metadata; give --powers") from None


@main.command("analyze")
@click.argument(
    "sources",
    metavar="[TIMESTAMP_FILES]...",
    nargs=-1,
    type=click.Path(exists=True, dir_okay=False),
)
@click.option(
    "--series", type=click.Path(exists=True, dir_okay=False), help="Pre-fitted g² series file"
)
@click.option("--powers", help="Excitation powers (µW) of the timestamp files, comma-separated")
@click.option(
    "--saturation",
    type=click.Path(exists=True, dir_okay=False),
    help="Count-rate series for the saturation fit",
)
@click.option("--i-inf", type=float, help="Saturated count rate in cps (overrides --saturation)")
@click.option("--psat", type=float, help="Saturation power in µW (overrides --saturation)")
@click.option("--pe", type=float, help="Fixed emitter photon fraction (default: from saturation)")
@click.option("--irf", type=float, default=0.0, show_default=True, help="IRF sigma in ns")
@click.option("--max-tau", type=float, help="Largest delay in ns")
@click.option("--bin-width", type=float, help="Bin width in ns")
@limit_options
@click.option("--eta-det-int", type=float, default=0.25, show_default=True)
@click.option("--eta-coll", type=float, default=0.78, show_default=True)
@click.option("--curves", type=click.Path(dir_okay=False), help="Write model curves to this file")
@jobs_option
@report_options
@click.pass_context
@handle_errors
def analyze_cmd(
    ctx: click.Context,
    sources: Tuple[str, ...],
    series: Optional[str],
    powers: Optional[str],
    saturation: Optional[str],
    i_inf: Optional[float],
    psat: Optional[float],
    pe: Optional[float],
    irf: float,
    max_tau: Optional[float],
    bin_width: Optional[float],
    tau1_0: Optional[float],
    tau2_0: Optional[float],
    tau2_inf: Optional[float],
    a_inf: Optional[float],
    eta_det_int: float,
    eta_coll: float,
    curves: Optional[str],
    jobs: int,
    output_format: str,
    output: Optional[str],
    quiet: bool,
    no_timestamp: bool,
) -> None:
    """Full chain: saturation, per-power g² fits, power dependence, quantum efficiency."""
    if bool(sources) == bool(series):
        raise click.UsageError("give either timestamp files or --series")
    meta = run_provenance(ctx, None, no_timestamp)
    report: Dict[str, Any] = {"provenance": meta}
    flags: List[str] = []

    sat_fit = None
    if saturation:
        sat_fit = fit_saturation(read_rate_series(saturation))
        report["saturation"] = format_fit(sat_fit)
        flags.extend(sat_fit.flags)
        i_inf = i_inf if i_inf is not None else sat_fit.parameters["I_inf"]
        psat = psat if psat is not None else sat_fit.parameters["Psat"]

    if sources:
        grid = parse_float_list(powers) if powers else [stream_power(s) for s in sources]
        if len(grid) != len(sources):
            raise click.BadParameter("one power per timestamp file", param_hint="--powers")
        order = np.argsort(grid)
        grid = [grid[i] for i in order]
        files = [sources[i] for i in order]

        def point_pe(power: float) -> float:
            if pe is not None:
                return pe
            return float(signal_fraction(sat_fit, power)) if sat_fit is not None else 1.0

        if not quiet:
            click.echo(f"Fitting g² at {len(files)} power(s)...", err=True)
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            fits = list(
                executor.map(
                    lambda item: fit_stream(
                        item[0], item[1], point_pe(item[1]), irf, max_tau, bin_width
                    ),
                    zip(files, grid),
                )
            )
        report["per_power"] = [
            {"power": p, "file": f, **format_fit(fit)} for p, f, fit in zip(grid, files, fits)
        ]
        if any(BUNCHING_UNRESOLVED in fit.flags for fit in fits):
            flags.append(BUNCHING_UNRESOLVED)
        if all(BUNCHING_UNRESOLVED in fit.flags for fit in fits):
            report["tau1"] = {f"{p:g}": fit.parameters["tau1"] for p, fit in zip(grid, fits)}
            report["flags"] = sorted(set(flags))
            logger.warning("No power point resolves the bunching; skipping the power fit")
            emit_report(ctx, report, "Analysis", output_format, output, quiet)
            return
        series_a, series_tau1, series_tau2 = series_from_fits(grid, fits)
    else:
        series_a, series_tau1, series_tau2 = read_g2_series(series or "")

    lv = limits_from_options(tau1_0, tau2_0, tau2_inf, a_inf)
    result = fit_power_dependence(series_a, series_tau1, series_tau2, lv=lv)
    report["power_dependence"] = power_fit_report(result)
    flags.extend(result.flags)

    if i_inf is not None:
        report["quantum_efficiency"] = {
            "i_inf_cps": i_inf,
            "eta_det_int": eta_det_int,
            "eta_coll": eta_coll,
            "eta_qe": estimate_quantum_efficiency(i_inf, result.rates, eta_det_int, eta_coll),
        }
    if curves:
        report["curves"] = str(
            write_curves(ctx, curves, result.rates, series_tau1.powers, psat, meta)
        )
    report["flags"] = sorted(set(flags))
    emit_report(ctx, report, "Analysis", output_format, output, quiet)


@main.command("reproduce-tables")
@click.option("--catalog", type=click.Path(exists=True, dir_okay=False), metavar="CSV_FILE")
@click.option("--no-dipole", is_flag=True, help="Skip the dipole checks")
@click.option("--battery", is_flag=True, help="Also run the synthetic round-trip battery")
@click.option("--emitters", default=BATTERY_EMITTERS, show_default=True, help="Battery emitters")
@click.option("--photons", type=float, default=1e7, show_default=True, help="Photons per power")
@click.option("--n-powers", type=click.IntRange(min=4), default=8, show_default=True)
@seed_option
@jobs_option
@report_options
@click.pass_context
@handle_errors
def reproduce_tables_cmd(
    ctx: click.Context,
    catalog: Optional[str],
    no_dipole: bool,
    battery: bool,
    emitters: str,
    photons: float,
    n_powers: int,
    seed: int,
    jobs: int,
    output_format: str,
    output: Optional[str],
    quiet: bool,
    no_timestamp: bool,
) -> None:
    """Reproduce the reference tables and run the acceptance checks."""
    records: Sequence[EmitterRecord] = load_catalog_from_csv(catalog) if catalog else CATALOG
    checks: Dict[str, List[Dict[str, Any]]] = {
        "steady_state": check_steady_state(records),
        "quantum_efficiency": check_quantum_efficiency(records),
        "model_contrast": check_model_contrast(records),
        "calibration": check_calibration(records),
    }
    if not no_dipole:
        if not quiet:
            click.echo("Running dipole checks...", err=True)
        checks["dipole"] = check_dipole(jobs=jobs)

    sat = saturation_battery(records, seed=seed)
    report: Dict[str, Any] = {
        "provenance": run_provenance(ctx, seed, no_timestamp),
        "checks": checks,
        "saturation_battery": sat,
    }
    ok = all(row["success"] for rows in checks.values() for row in rows)

    battery_results: List[Dict[str, Any]] = []
    if battery:
        names = [n.strip() for n in emitters.split(",") if n.strip()]
        try:
            selected = [get_record(n, records) for n in names]
        except KeyError as e:
            raise click.BadParameter(str(e.args[0]), param_hint="--emitters") from None
        battery_results = run_battery(
            selected, photons=photons, n_powers=n_powers, seed=seed, max_workers=jobs, quiet=quiet
        )
        report["battery"] = battery_results
        ok = ok and passed(battery_results)

    lines = ["=== Table Reproduction ===\n"]
    for title, rows in checks.items():
        lines.append(format_check_output(title.replace("_", " "), rows))
    lines.append(
        f"Mean fitted I_inf over {len(records)} emitters: {sat['mean_I_inf'] / 1e6:.3g} Mcps\n"
    )
    if battery:
        lines.append(format_battery_output(battery_results))
    emit_report(ctx, report, "Table Reproduction", output_format, output, quiet, "\n".join(lines))

    # Exit with error if any check failed
    if not ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
