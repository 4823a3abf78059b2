"""Channel synchronisation, acceptance windows, QBER / sifted fraction and 2D sweeps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DEFAULT_BIN_WIDTH,
    N_CHANNELS,
    AcceptanceWindow,
    Channel,
    ClockConfig,
    ParameterError,
    TagStream,
    fold_timetags,
)
from .pulsemodel import SyntheticChannelModel, emg_cdf

STEP = 250


class SynchronizationError(ValueError):
    pass


def peak_reference(stream: TagStream, clock: ClockConfig, channel,
                   bin_width: int = DEFAULT_BIN_WIDTH) -> int:
    """Phase (ps) of the mode bin centre of ``channel``'s arrival histogram."""
    hist = fold_timetags(stream, clock, bin_width)[Channel.parse(channel)]
    return hist.peak_position()


def _overlap_ratio(ref: np.ndarray, other: np.ndarray, shifts) -> np.ndarray:
    """Uncorrelated-to-actual overlap ratio of ``ref`` and ``other`` rolled by each shift."""
    n = len(ref)
    expected = ref.sum() * other.sum() / n
    actual = np.array([np.dot(ref, np.roll(other, s)) for s in shifts], dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(actual > 0, expected / actual, np.inf)


def synchronize_channels(stream: TagStream, clock: ClockConfig, input_polarization,
                         bin_width: int = DEFAULT_BIN_WIDTH) -> dict[Channel, int]:
    """Delays that align the orthogonal channel's arrival histogram with the input channel's.

    The crosstalk events in the orthogonal channel are a copy of the input
    pulse, so the delay that minimises the ratio of uncorrelated to actual
    histogram overlap aligns the two detectors. Coarse scan at ``bin_width``
    over the full period, then a 1 ps refinement within one bin.
    """
    pol = Channel.parse(input_polarization)
    orth = pol.orthogonal
    period = clock.period
    if len(stream.channel(pol)) == 0 or len(stream.channel(orth)) == 0:
        raise SynchronizationError(
            f"cannot synchronise: channel {pol.name if not len(stream.channel(pol)) else orth.name} is empty")
    coarse = fold_timetags(stream, clock, bin_width)
    a = coarse[pol].counts.astype(float)
    b = coarse[orth].counts.astype(float)
    nb = len(a)
    # circular cross-correlation over every bin shift in one go
    xc = np.fft.irfft(np.fft.rfft(a) * np.conj(np.fft.rfft(b)), n=nb)
    best_bin = int(np.argmax(np.round(xc, 9)))
    if best_bin > nb // 2:
        best_bin -= nb
    fine = fold_timetags(stream, clock, 1)
    a1 = fine[pol].counts.astype(float)
    b1 = fine[orth].counts.astype(float)
    centre = best_bin * bin_width
    shifts = np.arange(centre - bin_width, centre + bin_width + 1)
    ratio = _overlap_ratio(a1, b1, shifts)
    best = int(shifts[np.argmin(ratio)])
    best = (best + period // 2) % period - period // 2
    return {pol: 0, orth: best}


def window_mask(stream: TagStream, clock: ClockConfig, window: AcceptanceWindow,
                peak_ref: int = 0) -> np.ndarray:
    return window.contains(stream.timestamps % clock.period, clock.period, peak_ref)


def apply_window(stream: TagStream, clock: ClockConfig, window: AcceptanceWindow,
                 peak_ref: int = 0) -> TagStream:
    """Tags whose phase falls inside the (wrapped) window."""
    return stream[window_mask(stream, clock, window, peak_ref)]


@dataclass
class FilterMetrics:
    window: AcceptanceWindow
    n_correct: float
    n_wrong: float
    channel_counts: np.ndarray
    full_count: float

    @property
    def empty(self) -> bool:
        return self.n_correct + self.n_wrong <= 0

    @property
    def qber(self) -> float | None:
        """``None`` marks an empty window (no key), never NaN."""
        if self.empty:
            return None
        return self.n_wrong / (self.n_correct + self.n_wrong)

    @property
    def sifted_fraction(self) -> float:
        if self.full_count <= 0:
            return 0.0
        return (self.n_correct + self.n_wrong) / self.full_count


def metrics_for_window(stream: TagStream, clock: ClockConfig, input_polarization,
                       window: AcceptanceWindow, peak_ref: int | None = None,
                       bin_width: int = DEFAULT_BIN_WIDTH) -> FilterMetrics:
    pol = Channel.parse(input_polarization)
    if peak_ref is None:
        peak_ref = peak_reference(stream, clock, pol, bin_width)
    mask = window_mask(stream, clock, window, peak_ref)
    counts = np.bincount(stream.channels[mask], minlength=N_CHANNELS)[:N_CHANNELS]
    full = stream.counts()
    return FilterMetrics(window, int(counts[pol]), int(counts[pol.orthogonal]), counts,
                         int(full[pol] + full[pol.orthogonal]))


# ------------------------------------------------------------------ sweeps

def default_widths(period: int, step: int = STEP) -> np.ndarray:
    w = np.arange(step, period + 1, step)
    if w[-1] != period:
        w = np.append(w, period)
    return w


def default_centers(period: int, step: int = STEP) -> np.ndarray:
    half = period // 2
    return np.arange(-(half // step) * step, half + 1, step)


@dataclass
class SweepGrid:
    widths: np.ndarray
    centers: np.ndarray
    n_correct: np.ndarray
    n_wrong: np.ndarray
    channel_counts: np.ndarray
    full_count: float
    peak_ref: int
    input_polarization: Channel = Channel.H
    absolute: bool = False
    period: int = 12_500
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return (len(self.widths), len(self.centers))

    @property
    def empty(self) -> np.ndarray:
        return (self.n_correct + self.n_wrong) <= 0

    @property
    def qber(self) -> np.ndarray:
        tot = self.n_correct + self.n_wrong
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, self.n_wrong / np.where(tot > 0, tot, 1), np.nan)

    @property
    def sifted_fraction(self) -> np.ndarray:
        if self.full_count <= 0:
            return np.zeros(self.shape)
        return (self.n_correct + self.n_wrong) / self.full_count

    def cell(self, i: int, j: int) -> FilterMetrics:
        window = AcceptanceWindow(int(self.widths[i]), int(self.centers[j]), self.absolute)
        return FilterMetrics(window, self.n_correct[i, j], self.n_wrong[i, j],
                             self.channel_counts[i, j], self.full_count)

    def full_window(self) -> FilterMetrics:
        """Metrics of the whole period (independent of the grid)."""
        return FilterMetrics(AcceptanceWindow(self.period, 0, self.absolute),
                             self.meta["full_correct"], self.meta["full_wrong"],
                             np.zeros(N_CHANNELS), self.full_count)

    def rows(self, extra: dict | None = None):
        q = self.qber
        f = self.sifted_fraction
        for i, dt in enumerate(self.widths):
            for j, tc in enumerate(self.centers):
                row = {
                    "dt_ps": int(dt),
                    "tc_ps": int(tc),
                    "qber": None if self.empty[i, j] else float(q[i, j]),
                    "sifted_fraction": float(f[i, j]),
                    "n_correct": _num(self.n_correct[i, j]),
                    "n_wrong": _num(self.n_wrong[i, j]),
                }
                if extra:
                    for k, arr in extra.items():
                        row[k] = float(arr[i, j])
                yield row

    def to_csv(self, path, extra: dict | None = None, header: dict | None = None) -> None:
        cols = ["dt_ps", "tc_ps", "qber", "sifted_fraction", "n_correct", "n_wrong"]
        cols += list(extra or {})
        with open(path, "w", newline="") as f:
            meta = {"peak_ref_ps": self.peak_ref, "period_ps": self.period,
                    "input_polarization": self.input_polarization.name,
                    "absolute_center": self.absolute, **(header or {})}
            for k, v in meta.items():
                f.write(f"# {k}={v}\n")
            w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in self.rows(extra):
                row["qber"] = "empty" if row["qber"] is None else repr(row["qber"])
                w.writerow(row)

    def to_json(self, path, extra: dict | None = None) -> None:
        doc = {
            "period_ps": self.period,
            "peak_ref_ps": self.peak_ref,
            "input_polarization": self.input_polarization.name,
            "absolute_center": self.absolute,
            "cells": list(self.rows(extra)),
        }
        Path(path).write_text(json.dumps(doc))


def _num(x):
    x = float(x)
    return int(x) if x.is_integer() else x


def _window_starts(widths, centers, ref, period):
    w = np.asarray(widths, dtype=np.int64)[:, None]
    c = np.asarray(centers, dtype=np.int64)[None, :]
    start = (ref + c - w // 2) % period
    return start, start + w


def _check_grid(widths, centers, period):
    widths = np.asarray(widths, dtype=np.int64)
    centers = np.asarray(centers, dtype=np.int64)
    if widths.size == 0 or centers.size == 0:
        raise ParameterError("sweep grids must be non-empty")
    if widths.min() <= 0 or widths.max() > period:
        raise ParameterError(f"window widths must be in (0, {period}]")
    return widths, centers


def sweep(stream: TagStream, clock: ClockConfig, input_polarization, widths=None, centers=None,
          peak_ref: int | None = None, absolute: bool = False,
          bin_width: int = DEFAULT_BIN_WIDTH) -> SweepGrid:
    """Evaluate every (width, centre) window on the stream.

    Counts come from prefix sums of 1 ps phase histograms, so each cell is
    O(1) and equal to :func:`metrics_for_window` on the same window.
    """
    pol = Channel.parse(input_polarization)
    period = clock.period
    widths = default_widths(period) if widths is None else widths
    centers = default_centers(period) if centers is None else centers
    widths, centers = _check_grid(widths, centers, period)
    if absolute:
        ref = 0
    else:
        ref = peak_reference(stream, clock, pol, bin_width) if peak_ref is None else peak_ref
    fine = np.stack([h.counts for h in fold_timetags(stream, clock, 1)])
    cum = np.zeros((N_CHANNELS, 2 * period + 1), dtype=np.int64)
    cum[:, 1:] = np.cumsum(np.concatenate([fine, fine], axis=1), axis=1)
    start, stop = _window_starts(widths, centers, ref, period)
    counts = cum[:, stop] - cum[:, start]                       # (4, nw, nc)
    counts = np.moveaxis(counts, 0, -1)
    full = fine.sum(axis=1)
    return SweepGrid(widths, centers, counts[..., pol].astype(float),
                     counts[..., pol.orthogonal].astype(float), counts,
                     float(full[pol] + full[pol.orthogonal]), int(ref), pol, absolute, period,
                     {"full_correct": float(full[pol]), "full_wrong": float(full[pol.orthogonal])})


def _train_cdf(model: SyntheticChannelModel, x: np.ndarray) -> np.ndarray:
    """Pulse-train signal accumulated over [0, x) of the central period."""
    half = (model.train_length - 1) // 2
    out = np.zeros(np.shape(x))
    for k in range(-half, half + 1):
        shift = k * model.period
        out += emg_cdf(model.signal_shape, x - shift) - emg_cdf(model.signal_shape, -shift)
    return model.signal_area * out


def sweep_model(model: SyntheticChannelModel, bin_width: int, widths=None, centers=None,
                peak_ref: int | None = None) -> SweepGrid:
    """Analytic sweep of a synthetic channel pair (expected counts, no sampling).

    The central period is treated as one period of a periodic histogram, so
    windows wrap around its edges like they do for measured streams.
    """
    from .pulsemodel import synthetic_histograms

    period = model.period
    widths = default_widths(period) if widths is None else widths
    centers = default_centers(period) if centers is None else centers
    widths, centers = _check_grid(widths, centers, period)
    if peak_ref is None:
        correct, _ = synthetic_histograms(model, bin_width)
        i = int(np.argmax(correct))
        peak_ref = (i * bin_width + min((i + 1) * bin_width, period)) // 2
    start, stop = _window_starts(widths, centers, peak_ref, period)
    noise_density = model.noise_offset / bin_width

    def integral(a, b):
        # [a, b) with b possibly beyond the period end
        b1 = np.minimum(b, period)
        sig = _train_cdf(model, b1.astype(float)) - _train_cdf(model, a.astype(float))
        wrap = np.maximum(b - period, 0)
        sig = sig + _train_cdf(model, wrap.astype(float))
        return sig

    signal = integral(start, stop)
    noise = noise_density * (stop - start)
    n_correct = signal + noise
    n_wrong = model.crosstalk_fraction * signal + noise
    full_signal = float(_train_cdf(model, np.array(float(period))))
    full_noise = noise_density * period
    full_c = full_signal + full_noise
    full_w = model.crosstalk_fraction * full_signal + full_noise
    counts = np.zeros(n_correct.shape + (N_CHANNELS,))
    counts[..., 0] = n_correct
    counts[..., 1] = n_wrong
    return SweepGrid(widths, centers, n_correct, n_wrong, counts, full_c + full_w, int(peak_ref),
                     Channel.H, False, period, {"full_correct": full_c, "full_wrong": full_w})
