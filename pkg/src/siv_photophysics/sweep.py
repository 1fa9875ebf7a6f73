"""Per-power acquisition loop: simulate, correlate and fit g² at each excitation power."""

import logging
import math
import signal
import sys
import threading
import time
from dataclasses import dataclass, field, replace
from datetime import timedelta
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np

from .correlation import G2Histogram, correlate
from .emitter import SimConfig, expected_count_rate, simulate
from .errors import InvalidParameters, SivError
from .fitting import FitResult, PowerSeries, fit_g2, series_from_fits
from .rate_model import RateCoefficients, shape_from_rates

logger = logging.getLogger(__name__)

# histogram half-width cap (bins on each side of zero delay)
MAX_HALF_BINS = 10_000
TAU2_WINDOWS = 6.0
TAU1_BINS = 10.0


def histogram_window(tau1: float, tau2: float) -> Tuple[float, float]:
    """
    Default (max_tau, bin_width) in ns for an expected g² shape.

    The window spans several bunching times; the bin is a tenth of the
    antibunching time unless that would exceed MAX_HALF_BINS bins per side.
    """
    reach = tau2 if math.isfinite(tau2) else 50.0 * tau1
    max_tau = max(TAU2_WINDOWS * reach, 20.0 * tau1)
    bin_width = max(tau1 / TAU1_BINS, max_tau / MAX_HALF_BINS)
    return max_tau, bin_width


def point_seed(seed: int, index: int) -> int:
    """Independent 64-bit seed for the index-th power point."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class SweepPoint:
    power: float
    histogram: G2Histogram
    fit: Optional[FitResult]
    error: Optional[str] = None
    events: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "power": self.power,
            "events": self.events,
            "fit": self.fit.to_dict() if self.fit is not None else None,
            "error": self.error,
        }


@dataclass
class SweepResult:
    """Per-power fits collected by a PowerSweep."""

    points: List[SweepPoint] = field(default_factory=list)
    interrupted: bool = False
    elapsed: float = 0.0

    @property
    def fitted(self) -> List[SweepPoint]:
        return [p for p in self.points if p.fit is not None]

    def series(self) -> Tuple[PowerSeries, PowerSeries, PowerSeries]:
        """a, tau1 and tau2 series from the successfully fitted points."""
        points = self.fitted
        if not points:
            raise InvalidParameters("no power point was fitted")
        return series_from_fits(
            [p.power for p in points], [p.fit for p in points if p.fit is not None]
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "points": [p.to_dict() for p in self.points],
            "interrupted": self.interrupted,
            "elapsed": self.elapsed,
        }


class PowerSweep:
    """Simulates and fits an emitter over a list of excitation powers."""

    def __init__(
        self,
        rc: RateCoefficients,
        powers: Sequence[float],
        photons: float = 1e7,
        eta_detect: float = 0.01,
        background_rate: float = 0.0,
        irf_sigma: float = 0.0,
        seed: int = 0,
        jobs: int = 1,
        name: str = "sweep",
        quiet: bool = False,
    ) -> None:
        """
        Initialize the sweep.

        Args:
            rc: Rate coefficients with sigma set
            powers: Excitation powers in µW
            photons: Detected photons per power point
            eta_detect: Detection efficiency of the simulated setup
            background_rate: Uncorrelated background in cps
            irf_sigma: Instrument response width in ns
            seed: Base seed; each point derives its own
            jobs: Threads used by simulation and correlation
            name: Label for progress lines
            quiet: Suppress progress messages
        """
        if rc.sigma <= 0:
            raise InvalidParameters("rc.sigma must be > 0 for a power sweep")
        if photons <= 0:
            raise InvalidParameters("photons must be > 0")
        self.rc = rc
        self.powers = sorted(float(p) for p in powers)
        self.photons = photons
        self.eta_detect = eta_detect
        self.background_rate = background_rate
        self.irf_sigma = irf_sigma
        self.seed = seed
        self.jobs = jobs
        self.name = name
        self.quiet = quiet
        self.interrupted = False

    def _signal_handler(self, signum: int, frame: Any) -> None:
        """Handle CTRL+C gracefully."""
        self.interrupted = True

    def config(self, index: int) -> SimConfig:
        """Simulation config for the index-th power, sized to the photon budget."""
        cfg = SimConfig(
            rc=self.rc,
            power=self.powers[index],
            duration=1.0,
            eta_detect=self.eta_detect,
            background_rate=self.background_rate,
            irf_sigma=self.irf_sigma,
            seed=point_seed(self.seed, index),
        )
        return replace(cfg, duration=self.photons / expected_count_rate(cfg))

    def pe(self, index: int) -> float:
        cfg = self.config(index)
        total = expected_count_rate(cfg)
        return (total - cfg.background_rate) / total

    def measure(self, index: int) -> SweepPoint:
        power = self.powers[index]
        expected = shape_from_rates(self.rc, power)
        max_tau, bin_width = histogram_window(expected.tau1, expected.tau2)
        stream = simulate(self.config(index), jobs=self.jobs)
        hist = correlate(stream, max_tau, bin_width, jobs=self.jobs)
        try:
            fit: Optional[FitResult] = fit_g2(hist, pe=self.pe(index), irf_sigma=self.irf_sigma)
            error = None
        except SivError as e:
            fit, error = None, str(e)
        return SweepPoint(power=power, histogram=hist, fit=fit, error=error, events=stream.n_events)

    def _loop(self, result: SweepResult, start: float) -> None:
        total = len(self.powers)
        for index, power in enumerate(self.powers):
            if self.interrupted:
                click.echo("\n\nSweep interrupted.", err=True)
                break
            try:
                point = self.measure(index)
            except KeyboardInterrupt:
                self.interrupted = True
                click.echo("\n\nSweep interrupted.", err=True)
                break
            result.points.append(point)

            if not self.quiet:
                elapsed = timedelta(seconds=time.monotonic() - start)
                if point.fit is not None:
                    p = point.fit.parameters
                    status = f"a={p['a']:.3g} tau1={p['tau1']:.3g} ns tau2={p['tau2']:.4g} ns"
                else:
                    status = f"fit failed: {point.error}"
                click.echo(
                    f"[{self.name}] Power {index + 1}/{total} ({power:.4g} µW) - {status} - "
                    f"Elapsed: {str(elapsed).split('.')[0]}",
                    err=True,
                )

    def run(self) -> SweepResult:
        """
        Run the sweep, one power at a time.

        Returns:
            SweepResult with every completed point
        """
        result = SweepResult()
        start = time.monotonic()
        total = len(self.powers)

        if not self.quiet:
            click.echo(
                f"[{self.name}] Sweeping {total} powers ({self.photons:.3g} photons each). "
                "Press CTRL+C to stop early.",
                err=True,
            )

        main_thread = threading.current_thread() is threading.main_thread()
        previous = signal.signal(signal.SIGINT, self._signal_handler) if main_thread else None
        try:
            self._loop(result, start)
        finally:
            if previous is not None:
                signal.signal(signal.SIGINT, previous)

        result.elapsed = time.monotonic() - start
        result.interrupted = self.interrupted

        # If interrupted, ask whether to go on with the partial sweep
        if self.interrupted and main_thread:
            if not result.fitted:
                click.echo("No power point fitted. Exiting.", err=True)
                sys.exit(0)
            if not click.confirm(
                f"Fit the power dependence from {len(result.fitted)} point(s)?", default=True
            ):
                click.echo("Exiting without fitting.", err=True)
                sys.exit(0)

        logger.info("Sweep %s: %d/%d points fitted", self.name, len(result.fitted), total)
        return result
