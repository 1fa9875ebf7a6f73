"""Monte Carlo photon streams from a continuously pumped three-level emitter.

The emitter is a continuous-time Markov chain over the transitions 1→2
(k12 = σP), 2→1 (k21, emitting), 2→3 (k23) and 3→1 (k31(P)). Every return to
level 1 after an emission is a renewal point, so the time between two detected
photons is a sum of exponential waiting times whose counts are drawn first:
K emissions until one is detected (geometric in eta_detect), N shelving
excursions interleaved with them (negative binomial), and then the waiting
times themselves as Gamma variates. This samples the same chain without a
per-transition loop.

Photon records are integer picosecond ticks. The trajectory is generated in
fixed-size chunks, each with its own RNG substream derived from the seed and
the chunk index, so chunks can be drawn concurrently and merged in order.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .errors import InvalidParameters
from .rate_model import RateCoefficients, deshelving_rate, steady_state

logger = logging.getLogger(__name__)

TICKS_PER_NS = 1000
TICKS_PER_US = 1_000_000
TICKS_PER_S = 1_000_000_000_000

# intervals per occupation-time batch
OCCUPATION_BATCH = 4096

# RNG substream identifiers
_EMITTER_STREAM = 0
_BACKGROUND_STREAM = 1


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one simulated acquisition.

    ``irf_sigma`` is the standard deviation of the instrument response seen in
    the cross-correlation; each detected photon is jittered by irf_sigma/√2 so
    that the difference of two arrival times carries exactly irf_sigma.
    """

    rc: RateCoefficients
    power: float
    duration: float
    eta_detect: float = 1.0
    background_rate: float = 0.0
    irf_sigma: float = 0.0
    dead_time: float = 0.0
    splitter_ratio: float = 0.5
    seed: int = 0
    chunk_size: int = 1 << 18

    def __post_init__(self) -> None:
        for name in ("eta_detect", "splitter_ratio"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidParameters(f"{name} must lie in [0, 1], got {value}")
        for name in ("power", "duration", "background_rate", "irf_sigma", "dead_time"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise InvalidParameters(f"{name} must be finite and >= 0, got {value}")
        if not 0 <= self.seed < 2**64:
            raise InvalidParameters("seed must be a 64-bit unsigned integer")
        if self.chunk_size < OCCUPATION_BATCH or self.chunk_size % OCCUPATION_BATCH:
            raise InvalidParameters(f"chunk_size must be a multiple of {OCCUPATION_BATCH}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rc": self.rc.to_dict(),
            "power": self.power,
            "duration": self.duration,
            "eta_detect": self.eta_detect,
            "background_rate": self.background_rate,
            "irf_sigma": self.irf_sigma,
            "dead_time": self.dead_time,
            "splitter_ratio": self.splitter_ratio,
            "seed": self.seed,
            "chunk_size": self.chunk_size,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SimConfig":
        fields = dict(data)
        fields["rc"] = RateCoefficients(**fields["rc"])
        return cls(**fields)


@dataclass(frozen=True, eq=False)
class TimestampStream:
    """Two-channel photon record.

    Attributes:
        channel_a: Sorted, strictly increasing int64 picosecond ticks
        channel_b: Sorted, strictly increasing int64 picosecond ticks
        duration: Acquisition length in ns
        metadata: SimConfig dict or acquisition descriptor
        level_times: Optional (batches, 3) array of µs spent in levels 1-3,
            recorded by the simulator
    """

    channel_a: np.ndarray
    channel_b: np.ndarray
    duration: float
    metadata: Dict[str, Any] = field(default_factory=dict)
    level_times: Optional[np.ndarray] = None

    @property
    def duration_ticks(self) -> int:
        return int(round(self.duration * TICKS_PER_NS))

    @property
    def n_events(self) -> int:
        return int(self.channel_a.size + self.channel_b.size)

    def events(self) -> np.ndarray:
        """Both channels merged in time order."""
        return np.sort(np.concatenate([self.channel_a, self.channel_b]))


class OccupationFractions(NamedTuple):
    fractions: np.ndarray
    stderr: np.ndarray


class _Chunk(NamedTuple):
    intervals: np.ndarray
    levels: np.ndarray
    jitter: np.ndarray
    to_a: np.ndarray


def _substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _chunk_length(cfg: SimConfig, expected: float) -> int:
    wanted = max(OCCUPATION_BATCH, int(expected * 1.05) + OCCUPATION_BATCH)
    size = min(cfg.chunk_size, wanted)
    return int(math.ceil(size / OCCUPATION_BATCH) * OCCUPATION_BATCH)


def _draw_chunk(cfg: SimConfig, k12: float, k31: float, index: int, size: int) -> _Chunk:
    rc = cfg.rc
    rng = _substream(cfg.seed, _EMITTER_STREAM, index)
    emissions = rng.geometric(cfg.eta_detect, size)
    if rc.k23 > 0:
        shelvings = rng.negative_binomial(emissions, rc.k21 / (rc.k21 + rc.k23))
    else:
        shelvings = np.zeros(size, dtype=np.int64)
    excitations = emissions + shelvings

    levels = np.empty((size, 3))
    levels[:, 0] = rng.gamma(excitations, 1.0 / k12)
    levels[:, 1] = rng.gamma(excitations, 1.0 / (rc.k21 + rc.k23))
    levels[:, 2] = np.where(shelvings > 0, rng.gamma(np.maximum(shelvings, 1), 1.0 / k31), 0.0)

    if cfg.irf_sigma > 0:
        jitter = rng.normal(0.0, cfg.irf_sigma * TICKS_PER_NS / math.sqrt(2.0), size)
    else:
        jitter = np.zeros(size)
    to_a = rng.random(size) < cfg.splitter_ratio
    return _Chunk(levels.sum(axis=1), levels, jitter, to_a)


def _emitter_photons(
    cfg: SimConfig, jobs: int
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Detected emitter photons in ticks, their channel routing and level-time batches."""
    k12 = cfg.rc.sigma * cfg.power
    if cfg.eta_detect == 0 or k12 == 0 or cfg.duration == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=bool), None

    k31 = deshelving_rate(cfg.rc, cfg.power)
    t_end = cfg.duration * 1e6
    expected = expected_count_rate(cfg) * cfg.duration
    size = _chunk_length(cfg, expected)

    ticks: List[np.ndarray] = []
    routes: List[np.ndarray] = []
    batches: List[np.ndarray] = []
    offset = 0.0
    index = 0
    done = False

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        while not done:
            indices = range(index, index + max(1, jobs))
            chunks = list(executor.map(lambda j: _draw_chunk(cfg, k12, k31, j, size), indices))
            index += len(chunks)
            for chunk in chunks:
                times = offset + np.cumsum(chunk.intervals)
                inside = int(np.searchsorted(times, t_end, side="right"))
                stamped = np.rint(times[:inside] * TICKS_PER_US + chunk.jitter[:inside])
                ticks.append(stamped.astype(np.int64))
                routes.append(chunk.to_a[:inside])

                n_full = inside // OCCUPATION_BATCH * OCCUPATION_BATCH
                if n_full:
                    grouped = chunk.levels[:n_full].reshape(-1, OCCUPATION_BATCH, 3)
                    batches.append(grouped.sum(axis=1))
                offset = float(times[-1])
                if inside < size:
                    done = True
                    break

    logger.debug("Drew %d emitter chunks of %d intervals", index, size)
    level_times = np.concatenate(batches) if batches else None
    return np.concatenate(ticks), np.concatenate(routes), level_times


def _background_photons(cfg: SimConfig) -> Tuple[np.ndarray, np.ndarray]:
    if cfg.background_rate == 0 or cfg.duration == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=bool)
    rng = _substream(cfg.seed, _BACKGROUND_STREAM)
    count = rng.poisson(cfg.background_rate * cfg.duration)
    ticks = rng.integers(0, int(round(cfg.duration * TICKS_PER_S)), count, endpoint=True)
    return ticks.astype(np.int64), rng.random(count) < cfg.splitter_ratio


def apply_dead_time(ticks: np.ndarray, dead_time_ticks: int) -> np.ndarray:
    """Non-paralyzable dead-time filter over a sorted tick array."""
    if dead_time_ticks <= 0 or ticks.size < 2:
        return ticks
    if np.all(np.diff(ticks) >= dead_time_ticks):
        return ticks
    kept = []
    idx = 0
    n = ticks.size
    while idx < n:
        kept.append(idx)
        idx = int(np.searchsorted(ticks, ticks[idx] + dead_time_ticks, side="left"))
    return ticks[np.asarray(kept, dtype=np.int64)]


def _finish_channel(parts: List[np.ndarray], t_max: int, dead_time_ticks: int) -> np.ndarray:
    ticks = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    ticks = ticks[(ticks >= 0) & (ticks <= t_max)]
    # np.unique sorts and drops coincident ticks
    ticks = np.unique(ticks)
    return apply_dead_time(ticks, dead_time_ticks)


def simulate(cfg: SimConfig, jobs: int = 1) -> TimestampStream:
    """
    Simulate a two-detector photon record.

    Args:
        cfg: Simulation parameters including the seed
        jobs: Number of threads drawing trajectory chunks

    Returns:
        TimestampStream; identical cfg gives bit-identical channels for any jobs
    """
    emitted, emitted_to_a, level_times = _emitter_photons(cfg, jobs)
    background, background_to_a = _background_photons(cfg)

    t_max = int(round(cfg.duration * TICKS_PER_S))
    dead = int(round(cfg.dead_time * TICKS_PER_NS))
    channel_a = _finish_channel([emitted[emitted_to_a], background[background_to_a]], t_max, dead)
    channel_b = _finish_channel(
        [emitted[~emitted_to_a], background[~background_to_a]], t_max, dead
    )

    logger.info(
        "Simulated %.3g s at %.4g µW: %d + %d detected events",
        cfg.duration,
        cfg.power,
        channel_a.size,
        channel_b.size,
    )
    return TimestampStream(
        channel_a=channel_a,
        channel_b=channel_b,
        duration=cfg.duration * 1e9,
        metadata={"source": "simulation", "config": cfg.to_dict()},
        level_times=level_times,
    )


def expected_count_rate(cfg: SimConfig) -> float:
    """Mean detected rate eta·k21·n2(P) + background in counts per second."""
    n2 = steady_state(cfg.rc, cfg.power).n2
    return cfg.eta_detect * cfg.rc.k21 * n2 * 1e6 + cfg.background_rate


def occupation_fractions(stream: TimestampStream) -> OccupationFractions:
    """
    Fraction of simulated time spent in each level, with batch-means errors.

    Raises:
        InvalidParameters: If the stream carries no recorded level times
    """
    if stream.level_times is None or len(stream.level_times) == 0:
        raise InvalidParameters("stream has no recorded level occupation")
    batches = np.asarray(stream.level_times)
    fractions = batches.sum(axis=0) / batches.sum()
    if len(batches) < 2:
        return OccupationFractions(fractions, np.full(3, np.nan))
    per_batch = batches / batches.sum(axis=1, keepdims=True)
    stderr = per_batch.std(axis=0, ddof=1) / math.sqrt(len(batches))
    return OccupationFractions(fractions, stderr)
