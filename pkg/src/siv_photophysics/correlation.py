"""g² histograms, fluorescence time traces and blinking detection."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from .emitter import TICKS_PER_NS, TimestampStream
from .errors import DegenerateTrace, EmptyChannel, InvalidParameters

logger = logging.getLogger(__name__)

TICKS_PER_MS = 1_000_000_000

# upper bound on a-b pairs materialized per block
MAX_PAIRS_PER_BLOCK = 1 << 22

STABLE = "stable"
BLINKING = "blinking"
BLEACHED = "bleached"


@dataclass(frozen=True, eq=False)
class G2Histogram:
    """Coincidence histogram of b-minus-a arrival time differences.

    Bins are centred on integer multiples of the bin width. ``norm_constant``
    is the number of coincidences per bin expected for uncorrelated channels.
    """

    bin_edges: np.ndarray
    counts: np.ndarray
    norm_constant: float
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def normalized(self) -> np.ndarray:
        return self.counts / self.norm_constant

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])


@dataclass(frozen=True, eq=False)
class TimeTrace:
    """Count rate (cps) in consecutive windows of ``window`` ms."""

    window: float
    rates: np.ndarray

    @property
    def times(self) -> np.ndarray:
        """Window start times in ms."""
        return np.arange(self.rates.size) * self.window


@dataclass(frozen=True)
class IntermittenceReport:
    dark_intervals: List[Tuple[float, float]]
    threshold: float
    classification: str
    bright_level: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dark_intervals": [list(interval) for interval in self.dark_intervals],
            "threshold": self.threshold,
            "classification": self.classification,
            "bright_level": self.bright_level,
        }


def _block_histogram(
    a: np.ndarray,
    b: np.ndarray,
    starts: np.ndarray,
    stops: np.ndarray,
    bin_ticks: float,
    half_bins: int,
) -> np.ndarray:
    n_bins = 2 * half_bins + 1
    per_event = stops - starts
    total = int(per_event.sum())
    if total == 0:
        return np.zeros(n_bins, dtype=np.int64)

    a_idx = np.repeat(np.arange(a.size), per_event)
    first = np.cumsum(per_event) - per_event
    b_idx = np.repeat(starts, per_event) + (np.arange(total) - np.repeat(first, per_event))
    delta = (b[b_idx] - a[a_idx]).astype(np.float64)
    bins = np.floor(delta / bin_ticks + half_bins + 0.5).astype(np.int64)
    # float rounding at the outer window edge
    bins = np.clip(bins, 0, n_bins - 1)
    return np.bincount(bins, minlength=n_bins)


def correlate(
    stream: TimestampStream, max_tau: float, bin_width: float, jobs: int = 1
) -> G2Histogram:
    """
    Full pairwise cross-correlation of channel b against channel a.

    Args:
        stream: Two-channel photon record
        max_tau: Largest delay of interest in ns
        bin_width: Histogram bin width in ns
        jobs: Number of threads working on blocks of channel-a events

    Returns:
        G2Histogram over [-(K+1/2)w, (K+1/2)w) with K = round(max_tau / w)

    Raises:
        EmptyChannel: If either channel holds no events
    """
    if bin_width <= 0:
        raise InvalidParameters(f"bin_width must be > 0, got {bin_width}")
    if max_tau < 10 * bin_width:
        raise InvalidParameters("max_tau must be at least 10 bin widths")
    for name, channel in (("a", stream.channel_a), ("b", stream.channel_b)):
        if channel.size == 0:
            raise EmptyChannel(f"channel {name} has no events")

    a = stream.channel_a
    b = stream.channel_b
    half_bins = int(round(max_tau / bin_width))
    bin_ticks = bin_width * TICKS_PER_NS
    half_window = (half_bins + 0.5) * bin_ticks
    # integer delays in [-half_window, half_window)
    starts = np.searchsorted(b, a - np.int64(math.floor(half_window)), side="left")
    stops = np.searchsorted(b, a + np.int64(math.ceil(half_window)), side="left")

    cumulative = np.cumsum(stops - starts)
    total_pairs = int(cumulative[-1])
    cuts = np.searchsorted(
        cumulative, np.arange(MAX_PAIRS_PER_BLOCK, total_pairs, MAX_PAIRS_PER_BLOCK), side="left"
    )
    bounds = [0, *sorted(set(int(c) + 1 for c in cuts)), a.size]
    blocks = [(s, e) for s, e in zip(bounds[:-1], bounds[1:]) if e > s]

    def work(block: Tuple[int, int]) -> np.ndarray:
        s, e = block
        return _block_histogram(a[s:e], b, starts[s:e], stops[s:e], bin_ticks, half_bins)

    if jobs > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            counts = sum(executor.map(work, blocks))
    else:
        counts = sum(work(block) for block in blocks)

    edges = (np.arange(-half_bins, half_bins + 2) - 0.5) * bin_width
    norm = a.size * b.size * bin_width / stream.duration
    logger.info("Correlated %d pairs in %d blocks", total_pairs, len(blocks))
    return G2Histogram(
        bin_edges=edges,
        counts=np.asarray(counts, dtype=np.int64),
        norm_constant=norm,
        metadata={"max_tau": max_tau, "bin_width": bin_width, "pairs": total_pairs},
    )


def tail_level(hist: G2Histogram, fraction: float = 0.2) -> Tuple[float, float]:
    """
    Mean normalized g² over the outermost bins on both sides, with its
    Poisson standard error. Cross-checks the rate-based normalization.
    """
    n_side = max(1, int(len(hist.counts) * fraction / 2))
    tail = np.concatenate([hist.counts[:n_side], hist.counts[-n_side:]])
    mean = float(tail.mean() / hist.norm_constant)
    stderr = float(math.sqrt(max(tail.sum(), 1)) / tail.size / hist.norm_constant)
    return mean, stderr


def bin_timetrace(stream: TimestampStream, window: float) -> TimeTrace:
    """
    Count rate of both channels in consecutive windows; the last partial
    window is dropped.

    Args:
        stream: Photon record
        window: Window length in ms
    """
    if window <= 0:
        raise InvalidParameters(f"window must be > 0, got {window}")
    window_ticks = int(round(window * TICKS_PER_MS))
    n_windows = stream.duration_ticks // window_ticks
    events = np.concatenate([stream.channel_a, stream.channel_b])
    index = events // window_ticks
    counts = np.bincount(index[index < n_windows], minlength=n_windows)[:n_windows]
    return TimeTrace(window=window, rates=counts / (window * 1e-3))


def _runs_below(mask: np.ndarray) -> List[Tuple[int, int]]:
    padded = np.concatenate([[0], mask.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def detect_intermittence(
    trace: TimeTrace,
    threshold_fraction: float = 0.3,
    min_dark: float = 200.0,
    floor: float = 0.0,
    max_iterations: int = 20,
) -> IntermittenceReport:
    """
    Locate dark periods and classify the emitter as stable, blinking or bleached.

    The bright level starts at the 90th percentile of the trace and is refined
    to the median of windows above threshold_fraction times the level.

    Args:
        trace: Binned count-rate trace
        threshold_fraction: Dark threshold relative to the bright level, in (0, 1)
        min_dark: Shortest dark period kept, in ms
        floor: Absolute rate (cps) at or below which a trace counts as empty

    Raises:
        DegenerateTrace: If no window rises above floor
    """
    if not 0.0 < threshold_fraction < 1.0:
        raise InvalidParameters("threshold_fraction must lie in (0, 1)")
    rates = trace.rates
    if rates.size == 0 or rates.max() <= floor:
        raise DegenerateTrace("no window of the trace rises above the floor")

    level = float(np.percentile(rates, 90))
    if level <= floor:
        level = float(rates.max())
    for _ in range(max_iterations):
        bright = rates[rates >= threshold_fraction * level]
        updated = float(np.median(bright))
        if updated == level:
            break
        level = updated
    threshold = threshold_fraction * level

    intervals = []
    for start, stop in _runs_below(rates < threshold):
        if (stop - start) * trace.window >= min_dark:
            intervals.append((start * trace.window, stop * trace.window))

    classification = STABLE
    if intervals:
        classification = BLINKING
        start, stop = intervals[-1]
        if stop == rates.size * trace.window and stop - start >= 10 * min_dark:
            classification = BLEACHED
    logger.info("Trace classified %s with %d dark intervals", classification, len(intervals))
    return IntermittenceReport(
        dark_intervals=intervals,
        threshold=threshold,
        classification=classification,
        bright_level=level,
    )
