"""Cross-channel photon correlations, g2(0) estimation and block-wise monitoring."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .core import N_CHANNELS, AcceptanceWindow, Channel, ClockConfig, ParameterError, TagStream
from .filtering import window_mask

DEFAULT_MAX_DELAY = 125_000
DEFAULT_CORR_BIN = 250
DEFAULT_SIDE_PEAKS = 9


class G2Error(ValueError):
    pass


@dataclass
class CorrelationHistogram:
    """Counts of cross-channel delays ``t_b - t_a`` (channel a < channel b).

    Bin ``k`` is centred on ``k * bin_width`` for ``k`` in ``[-M, M]``.
    """

    bin_width: int
    max_delay: int
    counts: np.ndarray
    n_input_tags: int

    @property
    def taus(self) -> np.ndarray:
        m = self.max_delay // self.bin_width
        return np.arange(-m, m + 1) * self.bin_width

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(f"# bin_width_ps={self.bin_width}\n# max_delay_ps={self.max_delay}\n")
            f.write(f"# n_input_tags={self.n_input_tags}\n")
            f.write("tau_ps,counts\n")
            for t, c in zip(self.taus.tolist(), self.counts.tolist()):
                f.write(f"{t},{c}\n")


def _delay_bins(tau: np.ndarray, bin_width: int) -> np.ndarray:
    # round half away from zero so that tau and -tau land in mirrored bins
    mag = (np.abs(tau) + bin_width // 2) // bin_width
    return np.where(tau < 0, -mag, mag)


def _pair_delays(t: np.ndarray, ch: np.ndarray, lo: int, hi: int, max_delay: int,
                 bin_width: int, nbins: int) -> np.ndarray:
    """Histogram of pairs whose earlier tag index lies in ``[lo, hi)``."""
    counts = np.zeros(nbins, dtype=np.int64)
    m = nbins // 2
    active = np.arange(lo, hi)
    j = 1
    n = len(t)
    while len(active):
        active = active[active + j < n]
        if not len(active):
            break
        dt = t[active + j] - t[active]
        near = dt <= max_delay
        active = active[near]
        dt = dt[near]
        if not len(active):
            break
        ca = ch[active]
        cb = ch[active + j]
        distinct = ca != cb
        tau = np.where(ca < cb, dt, -dt)[distinct]
        counts += np.bincount(_delay_bins(tau, bin_width) + m, minlength=nbins)
        j += 1
    return counts


def correlate(stream: TagStream, max_delay: int = DEFAULT_MAX_DELAY,
              bin_width: int = DEFAULT_CORR_BIN, threads: int = 1) -> CorrelationHistogram:
    """Histogram delays of all distinct-channel tag pairs within ``max_delay``.

    Sliding pass over the time-sorted stream: for each shift ``j`` only the
    tags that still have a partner within range are carried on. With
    ``threads > 1`` the earlier-tag indices are split into contiguous
    segments; partners may lie past a segment end, so no pair is lost or
    counted twice.
    """
    if bin_width <= 0 or max_delay < 0:
        raise ParameterError("bin_width must be positive and max_delay non-negative")
    if max_delay % bin_width:
        raise ParameterError("max_delay must be a multiple of bin_width")
    t = stream.timestamps
    ch = stream.channels
    if len(t) > 1 and np.any(np.diff(t) < 0):
        raise ParameterError("stream must be time-sorted")
    nbins = 2 * (max_delay // bin_width) + 1
    n = len(t)
    if threads > 1 and n > 100_000:
        edges = np.linspace(0, n, threads * 4 + 1).astype(np.int64)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(lambda k: _pair_delays(t, ch, edges[k], edges[k + 1], max_delay,
                                                    bin_width, nbins), range(len(edges) - 1))
            counts = sum(parts, np.zeros(nbins, dtype=np.int64))
    else:
        counts = _pair_delays(t, ch, 0, n, max_delay, bin_width, nbins)
    return CorrelationHistogram(bin_width, max_delay, counts, n)


def brute_force_correlate(stream: TagStream, max_delay: int = DEFAULT_MAX_DELAY,
                          bin_width: int = DEFAULT_CORR_BIN) -> CorrelationHistogram:
    """All-pairs double loop; reference for :func:`correlate` on small inputs."""
    nbins = 2 * (max_delay // bin_width) + 1
    m = nbins // 2
    counts = np.zeros(nbins, dtype=np.int64)
    tags = list(stream)
    for i in range(len(tags)):
        for j in range(i + 1, len(tags)):
            (ca, ta), (cb, tb) = tags[i], tags[j]
            if ca == cb or abs(tb - ta) > max_delay:
                continue
            tau = tb - ta if ca < cb else ta - tb
            k = (abs(tau) + bin_width // 2) // bin_width
            counts[m + (k if tau >= 0 else -k)] += 1
    return CorrelationHistogram(bin_width, max_delay, counts, len(tags))


@dataclass
class G2Estimate:
    g2: float
    sigma: float
    n_zero: float
    side_areas: list
    accumulation_time: float = 0.0
    sifted_bits: int = 0

    @property
    def relative_error(self) -> float:
        return self.sigma / self.g2 if self.g2 > 0 else math.inf


def peak_areas(hist: CorrelationHistogram, period: int, n_side: int = DEFAULT_SIDE_PEAKS) -> np.ndarray:
    """Area of each one-period-wide peak window ``k = -n_side .. n_side``.

    Bins centred exactly on a window edge are shared half-half between the
    two neighbouring peaks.
    """
    if (n_side + 0.5) * period > hist.max_delay + hist.bin_width / 2:
        raise G2Error(f"delay range ±{hist.max_delay} ps does not cover {n_side} side peaks")
    taus = hist.taus.astype(float)
    half = period / 2
    areas = np.zeros(2 * n_side + 1)
    for idx, k in enumerate(range(-n_side, n_side + 1)):
        rel = taus - k * period
        w = np.where(np.abs(rel) < half, 1.0, np.where(np.abs(rel) == half, 0.5, 0.0))
        areas[idx] = float(np.dot(w, hist.counts))
    return areas


def estimate_g2(hist: CorrelationHistogram, clock: ClockConfig, n_side: int = DEFAULT_SIDE_PEAKS,
                side_error: str = "sem") -> G2Estimate:
    """g2(0) as zero-delay peak area over the mean side-peak area.

    Uncertainty by Gaussian propagation of sqrt(N0) and the spread of the side
    peaks: its standard error of the mean (``"sem"``) or the plain standard
    deviation (``"std"``).
    """
    areas = peak_areas(hist, clock.period, n_side)
    n0 = float(areas[n_side])
    sides = np.delete(areas, n_side)
    mean = float(sides.mean())
    if mean <= 0:
        raise G2Error("side peaks are empty; g2(0) is undefined")
    g2 = n0 / mean
    s = float(sides.std(ddof=1)) if len(sides) > 1 else 0.0
    if side_error == "sem":
        side_term = s**2 / (len(sides) * mean**2)
    elif side_error == "std":
        side_term = s**2 / mean**2
    else:
        raise ParameterError("side_error must be 'sem' or 'std'")
    if n0 > 0:
        sigma = g2 * math.sqrt(1 / n0 + side_term)
    else:
        # no zero-delay counts: one count of Poisson uncertainty
        sigma = 1.0 / mean
    return G2Estimate(g2, sigma, n0, sides.tolist())


def g2_from_stream(stream: TagStream, clock: ClockConfig, window: AcceptanceWindow | None = None,
                   peak_ref: int = 0, max_delay: int = DEFAULT_MAX_DELAY,
                   bin_width: int = DEFAULT_CORR_BIN, n_side: int = DEFAULT_SIDE_PEAKS,
                   threads: int = 1) -> G2Estimate:
    """Correlate (optionally temporally filtered) tags and estimate g2(0)."""
    if window is not None:
        stream = stream[window_mask(stream, clock, window, peak_ref)]
    return estimate_g2(correlate(stream, max_delay, bin_width, threads), clock, n_side)


def reference_sigma(est: G2Estimate, reference_g2: float) -> float:
    """Uncertainty of ``est`` if the true value were ``reference_g2``.

    The zero-delay count is Poisson with mean ``reference_g2 * mean_side``;
    using the observed count instead would shrink the error bar exactly when
    the count fluctuates low and inflate false alarms on that side.
    """
    sides = np.asarray(est.side_areas, dtype=float)
    mean = float(sides.mean())
    n0 = max(reference_g2 * mean, 1.0)
    side_term = float(sides.var(ddof=1)) / (len(sides) * mean**2) if len(sides) > 1 else 0.0
    return reference_g2 * math.sqrt(1 / n0 + side_term) if reference_g2 > 0 else math.sqrt(n0) / mean


@dataclass
class BlockReport:
    block_index: int
    t_start_s: float
    duration_s: float
    estimate: G2Estimate | None
    rates_hz: list
    qber: float | None
    sifted_bits: int
    alarm: bool
    truncated: bool = False

    def to_json(self) -> str:
        e = self.estimate
        return json.dumps({
            "block_index": self.block_index,
            "t_start_s": self.t_start_s,
            "g2": None if e is None else e.g2,
            "sigma": None if e is None else e.sigma,
            "qber": self.qber,
            "rates_hz": self.rates_hz,
            "sifted_bits": self.sifted_bits,
            "alarm": self.alarm,
            "truncated": self.truncated,
        })


@dataclass
class _Monitor:
    clock: ClockConfig
    block_ps: int
    reference_g2: float | None
    alarm_k: float
    input_polarization: Channel
    window: AcceptanceWindow | None
    peak_ref: int
    max_delay: int
    bin_width: int
    n_side: int
    threads: int
    index: int = 0
    pending: list = field(default_factory=list)

    def report(self, block: TagStream, length_ps: int, truncated: bool) -> BlockReport:
        t0 = self.index * self.block_ps
        length_s = length_ps * 1e-12
        rates = (block.counts() / length_s).tolist() if length_s > 0 else [0.0] * N_CHANNELS
        filtered = block
        if self.window is not None:
            filtered = block[window_mask(block, self.clock, self.window, self.peak_ref)]
        counts = filtered.counts()
        pol = self.input_polarization
        good, bad = int(counts[pol]), int(counts[pol.orthogonal])
        qber = bad / (good + bad) if good + bad else None
        try:
            est = estimate_g2(correlate(filtered, self.max_delay, self.bin_width, self.threads),
                              self.clock, self.n_side)
            est.accumulation_time = length_s
            est.sifted_bits = good + bad
        except G2Error:
            est = None
        alarm = False
        if self.reference_g2 is not None:
            alarm = est is None or abs(est.g2 - self.reference_g2) > self.alarm_k * reference_sigma(
                est, self.reference_g2)
        rep = BlockReport(self.index, t0 * 1e-12, length_s, est, rates, qber, good + bad, alarm, truncated)
        self.index += 1
        return rep


def iter_block_reports(chunks: Iterable[TagStream], clock: ClockConfig, block_duration: float,
                       reference_g2: float | None = None, alarm_k: float = 3.0,
                       input_polarization=Channel.H, window: AcceptanceWindow | None = None,
                       peak_ref: int = 0, duration: float | None = None,
                       max_delay: int = DEFAULT_MAX_DELAY, bin_width: int = DEFAULT_CORR_BIN,
                       n_side: int = DEFAULT_SIDE_PEAKS, threads: int = 1) -> Iterator[BlockReport]:
    """Streaming monitor over time-ordered chunks, holding at most one block.

    Blocks are the non-overlapping intervals ``[k·B, (k+1)·B)`` from time zero.
    The last block is flagged ``truncated`` when it extends beyond ``duration``
    (seconds; by default the time of the last tag).
    """
    if not block_duration > 0:
        raise ParameterError("block_duration must be positive")
    block_ps = int(round(block_duration * 1e12))
    mon = _Monitor(clock, block_ps, reference_g2, alarm_k, Channel.parse(input_polarization),
                   window, peak_ref, max_delay, bin_width, n_side, threads)
    buf: list[TagStream] = []
    last_ts = -1
    for chunk in chunks:
        if not len(chunk):
            continue
        if chunk.timestamps[0] < last_ts:
            raise ParameterError("chunks must be time-ordered")
        last_ts = int(chunk.timestamps[-1])
        while True:
            end = (mon.index + 1) * block_ps
            cut = int(np.searchsorted(chunk.timestamps, end, side="left"))
            if cut == len(chunk):
                buf.append(chunk)
                break
            buf.append(chunk[:cut])
            yield mon.report(TagStream.concatenate(buf), block_ps, False)
            buf = []
            chunk = chunk[cut:]
    end_ps = int(round(duration * 1e12)) if duration is not None else last_ts + 1
    while mon.index * block_ps < end_ps:
        start = mon.index * block_ps
        full = start + block_ps <= end_ps
        length = block_ps if full else end_ps - start
        yield mon.report(TagStream.concatenate(buf), length, not full)
        buf = []


def monitor_blocks(stream: TagStream, clock: ClockConfig, block_duration: float,
                   reference_g2: float | None = None, alarm_k: float = 3.0, **kwargs) -> list[BlockReport]:
    return list(iter_block_reports([stream], clock, block_duration, reference_g2, alarm_k, **kwargs))


def convergence_curve(stream: TagStream, clock: ClockConfig, accumulation_times,
                      input_polarization=Channel.H, window: AcceptanceWindow | None = None,
                      peak_ref: int = 0, max_delay: int = DEFAULT_MAX_DELAY,
                      bin_width: int = DEFAULT_CORR_BIN, n_side: int = DEFAULT_SIDE_PEAKS,
                      threads: int = 1) -> list[G2Estimate]:
    """g2(0) estimates on growing prefixes ``[0, T)`` of the stream."""
    pol = Channel.parse(input_polarization)
    if window is not None:
        stream = stream[window_mask(stream, clock, window, peak_ref)]
    out = []
    for T in accumulation_times:
        prefix = stream.between(0, int(round(T * 1e12)))
        est = estimate_g2(correlate(prefix, max_delay, bin_width, threads), clock, n_side)
        est.accumulation_time = float(T)
        counts = prefix.counts()
        est.sifted_bits = int(counts[pol] + counts[pol.orthogonal])
        out.append(est)
    return out
