"""File formats: timestamp records, delimited tables and reports."""

import csv
import io
import json
import logging
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from . import __version__
from .correlation import G2Histogram
from .emitter import TICKS_PER_NS, TimestampStream
from .errors import FileFormatError, TimestampFormatError
from .fitting import PowerSeries

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAGIC = b"SIVTTAG\x00"
FORMAT_VERSION = 1
TICK_PS = 1
# magic, version, channel count, tick (ps), duration (ticks), metadata length
_HEADER = struct.Struct("<8sHHIQI")

TABLE_BANNER = "# siv-photophysics"


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default)


def provenance(
    config: Dict[str, Any], seed: Optional[int], timestamp: bool = True
) -> Dict[str, Any]:
    """Metadata block embedded in every output."""
    meta: Dict[str, Any] = {
        "tool": "siv-photophysics",
        "version": __version__,
        "config": config,
        "seed": seed,
    }
    if timestamp:
        meta["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return meta


def write_timestamps(
    path: PathLike, stream: TimestampStream, metadata: Optional[Dict[str, Any]] = None
) -> None:
    """
    Write a two-channel stream in the binary timestamp format.

    Layout (little endian): header, metadata JSON, per-channel event counts
    (uint64), then each channel's sorted uint64 picosecond ticks.
    """
    meta = json.dumps(
        stream.metadata if metadata is None else metadata, sort_keys=True, default=_json_default
    ).encode("utf-8")
    channels = (stream.channel_a, stream.channel_b)
    with open(path, "wb") as f:
        f.write(
            _HEADER.pack(
                MAGIC, FORMAT_VERSION, len(channels), TICK_PS, stream.duration_ticks, len(meta)
            )
        )
        f.write(meta)
        f.write(np.array([ch.size for ch in channels], dtype="<u8").tobytes())
        for ch in channels:
            f.write(np.asarray(ch, dtype="<u8").tobytes())
    logger.info("Wrote %d events to %s", stream.n_events, path)


def _read_binary(path: PathLike) -> TimestampStream:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TimestampFormatError(f"{path}: truncated header")
    magic, version, n_channels, tick_ps, duration_ticks, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TimestampFormatError(f"{path}: not a timestamp file")
    if version != FORMAT_VERSION:
        raise TimestampFormatError(f"{path}: unsupported format version {version}")
    if n_channels != 2 or tick_ps != TICK_PS:
        raise TimestampFormatError(f"{path}: expected 2 channels at 1 ps, got {n_channels}")

    offset = _HEADER.size
    try:
        metadata = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TimestampFormatError(f"{path}: corrupt metadata block") from exc
    offset += meta_len
    counts = np.frombuffer(raw, dtype="<u8", count=n_channels, offset=offset)
    offset += 8 * n_channels
    if len(raw) != offset + 8 * int(counts.sum()):
        raise TimestampFormatError(f"{path}: event data does not match the header counts")

    channels = []
    for count in counts:
        ticks = np.frombuffer(raw, dtype="<u8", count=int(count), offset=offset)
        offset += 8 * int(count)
        channels.append(ticks.astype(np.int64))
    if any(np.any(np.diff(ch) <= 0) for ch in channels):
        raise TimestampFormatError(f"{path}: channel ticks are not strictly increasing")
    return TimestampStream(
        channel_a=channels[0],
        channel_b=channels[1],
        duration=duration_ticks / TICKS_PER_NS,
        metadata=metadata,
    )


def _read_text(path: PathLike) -> TimestampStream:
    """Plain-text records: one ``channel<TAB>time_ns`` per line, '#' comments."""
    channels: Dict[int, List[int]] = {0: [], 1: []}
    names = {"0": 0, "a": 0, "1": 1, "b": 1}
    duration = None
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                if key.strip() == "duration_ns":
                    duration = float(value)
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2 or parts[0].lower() not in names:
                raise TimestampFormatError(f"{path}:{lineno}: expected 'channel<TAB>time_ns'")
            try:
                ticks = int(round(float(parts[1]) * TICKS_PER_NS))
            except ValueError as exc:
                raise TimestampFormatError(f"{path}:{lineno}: bad time value") from exc
            channels[names[parts[0].lower()]].append(ticks)

    a = np.unique(np.asarray(channels[0], dtype=np.int64))
    b = np.unique(np.asarray(channels[1], dtype=np.int64))
    if duration is None:
        last = max([int(ch[-1]) for ch in (a, b) if ch.size] or [0])
        duration = last / TICKS_PER_NS
    return TimestampStream(a, b, duration, metadata={"source": str(path)})


def read_timestamps(path: PathLike) -> TimestampStream:
    """
    Read a timestamp file, binary or plain text.

    Raises:
        TimestampFormatError: If the file is malformed
    """
    with open(path, "rb") as f:
        head = f.read(len(MAGIC))
    if head == MAGIC:
        return _read_binary(path)
    return _read_text(path)


def format_table(
    columns: Dict[str, Sequence[float]], kind: str, metadata: Optional[Dict[str, Any]] = None
) -> str:
    """
    Render columns as tab-delimited text.

    A '#' header names the table kind and carries the metadata as JSON; the
    first non-comment row names the columns (with units in the names).
    """
    out = io.StringIO()
    out.write(f"{TABLE_BANNER} {kind}\n")
    if metadata is not None:
        out.write("# metadata: ")
        out.write(json.dumps(metadata, sort_keys=True, default=_json_default))
        out.write("\n")
    names = list(columns)
    writer = csv.writer(out, delimiter="\t", lineterminator="\n")
    writer.writerow(names)
    arrays = [np.asarray(columns[name]) for name in names]
    for row in zip(*arrays):
        writer.writerow(_cell(v) for v in row)
    return out.getvalue()


def _cell(value: Any) -> str:
    if isinstance(value, (np.integer, int)):
        return str(int(value))
    return f"{float(value):.12g}"


def write_table(
    path: PathLike,
    columns: Dict[str, Sequence[float]],
    kind: str,
    metadata: Optional[Dict[str, Any]] = None,
) -> None:
    with open(path, "w") as f:
        f.write(format_table(columns, kind, metadata))


def _parse_table(
    f: TextIO, source: str, required: Iterable[str]
) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    metadata: Dict[str, Any] = {}
    body = []
    for line in f:
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            if key.strip() == "metadata":
                metadata = json.loads(value)
            continue
        if line.strip():
            body.append(line)

    reader = csv.DictReader(body, delimiter="\t")
    fieldnames = reader.fieldnames or []
    missing = set(required) - set(fieldnames)
    if missing:
        raise FileFormatError(
            f"{source} must contain columns: {', '.join(sorted(missing))}\n"
            f"Found: {', '.join(fieldnames)}"
        )
    rows = list(reader)
    try:
        columns = {
            name: np.array([float(row[name]) if row[name] else np.nan for row in rows])
            for name in fieldnames
        }
    except ValueError as exc:
        raise FileFormatError(f"{source}: non-numeric value ({exc})") from exc
    return columns, metadata


def read_table(
    path: PathLike, required: Iterable[str] = ()
) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a delimited table written by ``write_table``.

    Returns:
        (columns, metadata)

    Raises:
        FileFormatError: If a required column is missing or a value is not numeric
    """
    with open(path, "r") as f:
        return _parse_table(f, str(path), required)


def histogram_columns(hist: G2Histogram) -> Dict[str, np.ndarray]:
    return {"tau_ns": hist.centers, "counts": hist.counts, "g2": hist.normalized}


def read_histogram(path: PathLike) -> G2Histogram:
    columns, metadata = read_table(path, required=("tau_ns", "counts"))
    centers = columns["tau_ns"]
    if centers.size < 2:
        raise FileFormatError(f"{path}: histogram needs at least two bins")
    width = float(metadata.get("bin_width", centers[1] - centers[0]))
    edges = np.append(centers - 0.5 * width, centers[-1] + 0.5 * width)
    if "norm_constant" in metadata:
        norm = float(metadata["norm_constant"])
    elif "g2" in columns:
        nonzero = columns["g2"] > 0
        norm = float(np.median(columns["counts"][nonzero] / columns["g2"][nonzero]))
    else:
        raise FileFormatError(f"{path}: no normalization constant")
    return G2Histogram(edges, columns["counts"], norm, metadata=metadata)


def read_rate_series(path: PathLike) -> PowerSeries:
    """Count-rate series with columns power_uw, rate_cps and optional rate_err."""
    columns, _ = read_table(path, required=("power_uw", "rate_cps"))
    err = columns.get("rate_err")
    return PowerSeries(columns["power_uw"], columns["rate_cps"], err, quantity="rate_cps")


def read_g2_series(path: PathLike) -> Tuple[PowerSeries, PowerSeries, PowerSeries]:
    """
    Pre-fitted g² parameters per power: columns power_uw, a, tau1_ns, tau2_ns
    and optional a_err, tau1_err, tau2_err. Rows with an empty or nan value
    are left out of that quantity's series.
    """
    columns, _ = read_table(path, required=("power_uw", "a", "tau1_ns", "tau2_ns"))
    powers = columns["power_uw"]
    out = []
    for name, column, err_name in (
        ("a", "a", "a_err"),
        ("tau1", "tau1_ns", "tau1_err"),
        ("tau2", "tau2_ns", "tau2_err"),
    ):
        values = columns[column]
        keep = np.isfinite(values)
        err = columns.get(err_name)
        if err is not None:
            err = err[keep]
            if not np.all(np.isfinite(err) & (err > 0)):
                err = None
        out.append(PowerSeries(powers[keep], values[keep], err, quantity=name))
    return out[0], out[1], out[2]


def _render_value(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)) and all(isinstance(v, (int, float)) for v in value):
        return ", ".join(_render_value(v) for v in value)
    return str(value)


def format_text_report(report: Dict[str, Any], title: Optional[str] = None) -> str:
    """
    Human-readable rendering of a nested report dictionary.

    Args:
        report: Report data; nested dicts become indented sections
        title: Optional banner line
    """
    lines = [f"=== {title} ===", ""] if title else []

    def walk(data: Dict[str, Any], indent: int) -> None:
        pad = "  " * indent
        for key, value in data.items():
            if isinstance(value, dict):
                lines.append(f"{pad}{key}:")
                walk(value, indent + 1)
            elif isinstance(value, list) and value and isinstance(value[0], dict):
                lines.append(f"{pad}{key}:")
                for item in value:
                    walk(item, indent + 1)
                    lines.append("")
            else:
                lines.append(f"{pad}{key}: {_render_value(value)}")

    walk(json.loads(to_json(report)), 0)
    return "\n".join(lines).rstrip() + "\n"


def render(
    report: Dict[str, Any], output_format: str = "text", title: Optional[str] = None
) -> str:
    """Render a report as text or as structured JSON."""
    if output_format.lower() == "structured":
        return to_json(report) + "\n"
    return format_text_report(report, title)
