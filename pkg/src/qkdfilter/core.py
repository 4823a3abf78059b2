"""Time-tag record model, arrival-time folding and TTAG/CSV file I/O.

All times are integer picoseconds. A stream is stored column-wise as two
numpy arrays (channel ids and timestamps) rather than a list of records.
"""

from __future__ import annotations

import csv
import enum
import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

MAGIC = b"TTAG\x01"
_RECORD = np.dtype([("channel", "u1"), ("timestamp", "<u8")])
DEFAULT_BIN_WIDTH = 25


class FormatError(ValueError):
    """Raised for malformed time-tag files."""


class ParameterError(ValueError):
    """Raised for invalid model or analysis parameters."""


class Channel(enum.IntEnum):
    H = 0
    V = 1
    D = 2
    A = 3

    @property
    def basis(self) -> int:
        return int(self) // 2

    @property
    def orthogonal(self) -> "Channel":
        return Channel(int(self) ^ 1)

    @classmethod
    def parse(cls, value) -> "Channel":
        if isinstance(value, Channel):
            return value
        if isinstance(value, str) and value.strip().isdigit():
            value = int(value)
        elif isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ParameterError(f"unknown channel {value!r}") from None
        try:
            return cls(int(value))
        except ValueError:
            raise ParameterError(f"unknown channel {value!r}") from None


N_CHANNELS = len(Channel)


class TimeTag(NamedTuple):
    channel: Channel
    timestamp: int


@dataclass(frozen=True)
class ClockConfig:
    repetition_rate: float = 80e6

    @property
    def period(self) -> int:
        return int(round(1e12 / self.repetition_rate))

    @classmethod
    def from_period(cls, period_ps: int) -> "ClockConfig":
        if period_ps <= 0:
            raise ParameterError("period must be positive")
        return cls(1e12 / period_ps)

    def __post_init__(self):
        if not self.repetition_rate > 0 or self.period <= 0:
            raise ParameterError("repetition rate must give a positive period")


@dataclass(frozen=True)
class AcceptanceWindow:
    """Temporal filter of width ``width`` centred ``center`` ps from a reference.

    The reference is the arrival-histogram peak unless ``absolute`` is set, in
    which case ``center`` is a phase within the clock period.
    """

    width: int
    center: int = 0
    absolute: bool = False

    def bounds(self, period: int, peak_reference: int = 0) -> tuple[int, int]:
        """Return ``(start, stop)`` phases; ``stop`` may exceed ``period`` (wrapped)."""
        if not 0 < self.width <= period:
            raise ParameterError(f"window width must be in (0, {period}] ps")
        ref = 0 if self.absolute else peak_reference
        start = (ref + self.center - self.width // 2) % period
        return start, start + self.width

    def contains(self, phase: np.ndarray, period: int, peak_reference: int = 0) -> np.ndarray:
        start, stop = self.bounds(period, peak_reference)
        if self.width == period:
            return np.ones(np.shape(phase), dtype=bool)
        rel = (np.asarray(phase) - start) % period
        return rel < (stop - start)


@dataclass
class TagStream:
    """Column-wise container of time tags, sorted by timestamp."""

    channels: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=np.uint8)
        self.timestamps = np.ascontiguousarray(self.timestamps, dtype=np.int64)
        if self.channels.shape != self.timestamps.shape:
            raise ParameterError("channel and timestamp arrays differ in length")

    @classmethod
    def empty(cls) -> "TagStream":
        return cls(np.zeros(0, np.uint8), np.zeros(0, np.int64))

    @classmethod
    def from_tags(cls, tags) -> "TagStream":
        tags = list(tags)
        if not tags:
            return cls.empty()
        ch = np.array([int(Channel.parse(c)) for c, _ in tags], dtype=np.uint8)
        ts = np.array([int(t) for _, t in tags], dtype=np.int64)
        return cls(ch, ts).sorted()

    @classmethod
    def concatenate(cls, streams) -> "TagStream":
        streams = list(streams)
        if not streams:
            return cls.empty()
        return cls(
            np.concatenate([s.channels for s in streams]),
            np.concatenate([s.timestamps for s in streams]),
        ).sorted()

    def sorted(self) -> "TagStream":
        # order on (timestamp, channel) so ties are fully determined
        if len(self) and 0 <= self.timestamps.min() and self.timestamps.max() < 2**60:
            order = np.argsort(self.timestamps * N_CHANNELS + self.channels, kind="stable")
        else:
            order = np.lexsort((self.channels, self.timestamps))
        return TagStream(self.channels[order], self.timestamps[order])

    def __len__(self) -> int:
        return len(self.timestamps)

    def __iter__(self) -> Iterator[TimeTag]:
        for c, t in zip(self.channels.tolist(), self.timestamps.tolist()):
            yield TimeTag(Channel(c), t)

    def __getitem__(self, key) -> "TagStream":
        return TagStream(self.channels[key], self.timestamps[key])

    def channel(self, ch) -> np.ndarray:
        return self.timestamps[self.channels == int(ch)]

    def counts(self) -> np.ndarray:
        return np.bincount(self.channels, minlength=N_CHANNELS)[:N_CHANNELS]

    def duration(self) -> int:
        return int(self.timestamps[-1]) if len(self) else 0

    def between(self, t_start: int, t_stop: int) -> "TagStream":
        lo, hi = np.searchsorted(self.timestamps, [t_start, t_stop], side="left")
        return self[lo:hi]

    def shifted(self, delays) -> "TagStream":
        """Add a per-channel delay (mapping channel -> ps) and re-sort."""
        ts = self.timestamps.copy()
        for ch, d in dict(delays).items():
            ts[self.channels == int(ch)] += int(d)
        return TagStream(self.channels, ts).sorted()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TagStream)
            and np.array_equal(self.channels, other.channels)
            and np.array_equal(self.timestamps, other.timestamps)
        )


def shift_channels(stream: TagStream, delays, period: int) -> TagStream:
    """Apply per-channel delays keeping every timestamp non-negative.

    When a negative delay would push a tag before zero, the whole stream is
    moved later by a multiple of ``period``, which leaves all phases unchanged.
    """
    out = stream.shifted(delays)
    if len(out) and out.timestamps[0] < 0:
        k = -(out.timestamps[0] // period)
        out = TagStream(out.channels, out.timestamps + k * period)
    return out


@dataclass
class ArrivalHistogram:
    channel: Channel
    bin_width: int
    counts: np.ndarray
    period: int
    truncated: bool = False
    total_events: int = field(init=False)

    def __post_init__(self):
        self.total_events = int(np.sum(self.counts))

    @property
    def bin_starts(self) -> np.ndarray:
        return np.arange(len(self.counts)) * self.bin_width

    def peak_position(self) -> int:
        """Centre of the mode bin in ps; ties go to the earliest bin."""
        i = int(np.argmax(self.counts))
        stop = min((i + 1) * self.bin_width, self.period)
        return (i * self.bin_width + stop) // 2


def fold_timetags(stream: TagStream, clock: ClockConfig, bin_width: int = DEFAULT_BIN_WIDTH,
                  allow_truncation: bool = True) -> list[ArrivalHistogram]:
    """Histogram the phase ``timestamp mod period`` of every tag, per channel."""
    if bin_width <= 0:
        raise ParameterError("bin_width must be positive")
    period = clock.period
    nbins = -(-period // bin_width)
    truncated = nbins * bin_width != period
    if truncated and not allow_truncation:
        raise ParameterError(f"bin width {bin_width} does not divide period {period}")
    idx = (stream.timestamps % period) // bin_width
    flat = np.bincount(stream.channels.astype(np.int64) * nbins + idx,
                       minlength=N_CHANNELS * nbins)[: N_CHANNELS * nbins]
    flat = flat.reshape(N_CHANNELS, nbins)
    return [ArrivalHistogram(Channel(c), bin_width, flat[c].copy(), period, truncated)
            for c in range(N_CHANNELS)]


def phase_histograms(stream: TagStream, period: int) -> np.ndarray:
    """1 ps resolution phase histograms, shape ``(4, period)``."""
    return np.stack([h.counts for h in fold_timetags(stream, ClockConfig.from_period(period), 1)])


# ---------------------------------------------------------------- file I/O

def write_timetag_file(path, clock: ClockConfig, stream: TagStream) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        _write_csv(path, stream, clock.period)
        return
    rec = np.empty(len(stream), dtype=_RECORD)
    rec["channel"] = stream.channels
    if len(stream) and stream.timestamps.min() < 0:
        raise ParameterError("timestamps must be non-negative")
    rec["timestamp"] = stream.timestamps.astype(np.uint64)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<QB", clock.period, N_CHANNELS))
        f.write(rec.tobytes())


def _read_header(f) -> int:
    head = f.read(len(MAGIC) + 9)
    if len(head) < len(MAGIC) or head[:4] != MAGIC[:4]:
        raise FormatError("bad magic, not a TTAG file")
    if head[4] != MAGIC[4]:
        raise FormatError(f"unsupported TTAG version {head[4]}")
    if len(head) < len(MAGIC) + 9:
        raise FormatError("truncated header")
    period, nch = struct.unpack("<QB", head[len(MAGIC):])
    if nch != N_CHANNELS:
        raise FormatError(f"expected {N_CHANNELS} channels, file declares {nch}")
    if period == 0:
        raise FormatError("period must be positive")
    return period


def _check_records(rec) -> TagStream:
    if len(rec) and rec["channel"].max() >= N_CHANNELS:
        raise FormatError("channel id out of range")
    return TagStream(rec["channel"], rec["timestamp"].astype(np.int64))


def _warn_non_monotone(stream: TagStream) -> None:
    for c in range(N_CHANNELS):
        if np.any(np.diff(stream.channel(c)) < 0):
            warnings.warn(f"timestamps of channel {Channel(c).name} are not monotone",
                          stacklevel=3)


def read_timetag_file(path) -> tuple[ClockConfig, TagStream]:
    """Read a TTAG binary (or ``.csv``) file; tags are returned in file order."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        clock, stream = _read_csv(path)
    else:
        with open(path, "rb") as f:
            period = _read_header(f)
            body = f.read()
        if len(body) % _RECORD.itemsize:
            raise FormatError("truncated record at end of file")
        stream = _check_records(np.frombuffer(body, dtype=_RECORD))
        clock = ClockConfig.from_period(period)
    _warn_non_monotone(stream)
    return clock, stream


def iter_timetag_file(path, chunk_size: int = 1 << 20) -> Iterator[tuple[ClockConfig, TagStream]]:
    """Yield ``(clock, chunk)`` pieces of a TTAG file with bounded memory."""
    with open(path, "rb") as f:
        period = _read_header(f)
        clock = ClockConfig.from_period(period)
        while True:
            body = f.read(chunk_size * _RECORD.itemsize)
            if not body:
                return
            if len(body) % _RECORD.itemsize:
                raise FormatError("truncated record at end of file")
            yield clock, _check_records(np.frombuffer(body, dtype=_RECORD))


def _write_csv(path: Path, stream: TagStream, period: int) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# period_ps={period}\n")
        f.write("channel,timestamp_ps\n")
        buf = io.StringIO()
        np.savetxt(buf, np.column_stack([stream.channels, stream.timestamps]), fmt="%d", delimiter=",")
        f.write(buf.getvalue())


def parse_csv_records(lines) -> TagStream:
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        return TagStream.empty()
    if [h.strip() for h in header] != ["channel", "timestamp_ps"]:
        raise FormatError("CSV header must be 'channel,timestamp_ps'")
    ch, ts = [], []
    for row in reader:
        if not row or row[0].startswith("#"):
            continue
        if len(row) != 2:
            raise FormatError(f"malformed CSV record {row!r}")
        ch.append(int(Channel.parse(row[0].strip())))
        ts.append(int(row[1]))
    return TagStream(np.array(ch, np.uint8), np.array(ts, np.int64))


def _read_csv(path: Path) -> tuple[ClockConfig, TagStream]:
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    period = 12_500
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            if key.strip() == "period_ps":
                period = int(val)
            continue
        body.append(line)
    return ClockConfig.from_period(period), parse_csv_records(body)
