"""Monte Carlo generation of four-channel detection streams.

The clock periods are split into fixed-size blocks. Each block draws from its
own generator seeded by ``(seed, block_index)``, so the merged output does not
depend on how many worker threads process the blocks.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import N_CHANNELS, Channel, ClockConfig, ParameterError, TagStream
from .pulsemodel import FWHM_TO_SIGMA, PulseShape, sample_arrival_time

BLOCK_PERIODS = 1 << 25


def _four(value, name):
    if np.isscalar(value):
        value = (value,) * N_CHANNELS
    value = tuple(float(v) for v in value)
    if len(value) != N_CHANNELS:
        raise ParameterError(f"{name} needs {N_CHANNELS} entries")
    return value


@dataclass(frozen=True)
class SourceReceiverModel:
    """Alice's source, a lossy channel and Bob's four-port receiver.

    ``reexcitation_delay`` (ps, default 0) delays the second photon of a
    two-photon pulse by an extra exponential time; with 0 both photons are
    independent draws from the pulse shape.
    """

    clock: ClockConfig = field(default_factory=ClockConfig)
    mu: float = 0.0043
    g2_target: float = 0.089
    pulse: PulseShape = field(default_factory=lambda: PulseShape(750.0, 0.0, 2000.0))
    channel_loss_db: float = 0.0
    input_polarization: Channel = Channel.H
    efficiency: tuple = (1.0, 1.0, 1.0, 1.0)
    jitter_fwhm: tuple = (0.0, 0.0, 0.0, 0.0)
    dark_rate: tuple = (0.0, 0.0, 0.0, 0.0)
    crosstalk: float = 0.0
    dead_time: int = 0
    reexcitation_delay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "input_polarization", Channel.parse(self.input_polarization))
        for name in ("efficiency", "jitter_fwhm", "dark_rate"):
            object.__setattr__(self, name, _four(getattr(self, name), name))
        if self.mu < 0 or self.g2_target < 0:
            raise ParameterError("mu and g2_target must be non-negative")
        if not 0 <= self.crosstalk < 0.5:
            raise ParameterError("crosstalk q must be in [0, 0.5)")
        if any(not 0 <= e <= 1 for e in self.efficiency):
            raise ParameterError("efficiencies must be in [0, 1]")
        if any(r < 0 for r in self.dark_rate) or any(j < 0 for j in self.jitter_fwhm):
            raise ParameterError("dark rates and jitters must be non-negative")
        if self.dead_time < 0 or self.reexcitation_delay < 0:
            raise ParameterError("dead_time and reexcitation_delay must be non-negative")
        p0, p1, p2 = self.photon_number_probabilities()
        if min(p0, p1, p2) < 0 or max(p0, p1, p2) > 1:
            raise ParameterError(
                f"mu={self.mu}, g2={self.g2_target} give an invalid photon-number "
                f"distribution (P0={p0:.4g}, P1={p1:.4g}, P2={p2:.4g})")

    def photon_number_probabilities(self) -> tuple[float, float, float]:
        p2 = self.mu**2 * self.g2_target / 2
        p1 = self.mu - 2 * p2
        return 1 - p1 - p2, p1, p2

    @property
    def transmission(self) -> float:
        return 10 ** (-self.channel_loss_db / 10)

    def routing(self) -> np.ndarray:
        """Probability that a photon entering Bob is routed to each port."""
        pol = self.input_polarization
        out = np.zeros(N_CHANNELS)
        out[pol] = 0.5 * (1 - self.crosstalk)
        out[pol.orthogonal] = 0.5 * self.crosstalk
        for c in Channel:
            if c.basis != pol.basis:
                out[c] = 0.25
        return out

    def detection_probabilities(self) -> np.ndarray:
        """Per-photon probability of a click in each channel."""
        return self.transmission * self.routing() * np.asarray(self.efficiency)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clock"] = {"repetition_rate": self.clock.repetition_rate}
        d["pulse"] = asdict(self.pulse)
        d["input_polarization"] = self.input_polarization.name
        for k in ("efficiency", "jitter_fwhm", "dark_rate"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SourceReceiverModel":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown model fields: {sorted(unknown)}")
        if "clock" in d and isinstance(d["clock"], dict):
            d["clock"] = ClockConfig(**d["clock"])
        if "pulse" in d and isinstance(d["pulse"], dict):
            d["pulse"] = PulseShape(**d["pulse"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class SimulationRun:
    model: SourceReceiverModel
    duration: float
    seed: int = 0

    def __post_init__(self):
        if not self.duration > 0:
            raise ParameterError("duration must be positive")

    @property
    def n_periods(self) -> int:
        return int(round(self.duration * self.model.clock.repetition_rate))


@dataclass
class ExpectedRates:
    rates_hz: np.ndarray
    p_signal: float
    p_dc: float
    p_click: float
    qber: float
    eq1_qber: float


def expected_rates(model: SourceReceiverModel) -> ExpectedRates:
    """Analytic click rates and per-pulse probabilities of the model.

    ``qber`` uses the exact per-channel rates of the input basis; ``eq1_qber``
    is the textbook decomposition, identical when both basis detectors have
    the same efficiency.
    """
    period_s = model.clock.period * 1e-12
    _, p1, p2 = model.photon_number_probabilities()
    a = model.detection_probabilities()
    p_photon = p1 * a + p2 * (1 - (1 - a) ** 2)
    dark = np.asarray(model.dark_rate)
    p_dark = -np.expm1(-dark * period_s)
    per_period = p_photon + p_dark - p_photon * p_dark
    rates = per_period / period_s

    p_signal = model.mu * model.transmission * float(np.mean(model.efficiency))
    p_dc = float(dark.sum() * period_s)
    p_click = p_signal + p_dc - p_signal * p_dc

    pol = model.input_polarization
    good, bad = rates[pol], rates[pol.orthogonal]
    qber = float(bad / (good + bad)) if good + bad > 0 else math.nan

    # the same decomposition restricted to the two detectors of the sifted basis
    basis = [pol, pol.orthogonal]
    s_basis = float(model.mu * model.transmission * model.routing()[basis].sum()
                    * np.mean(np.asarray(model.efficiency)[basis]))
    dc_basis = float(dark[basis].sum() * period_s)
    click_basis = s_basis + dc_basis - s_basis * dc_basis
    eq1 = (model.crosstalk * s_basis + dc_basis / 2) / click_basis if click_basis > 0 else math.nan
    return ExpectedRates(rates, p_signal, p_dc, p_click, qber, float(eq1))


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), block])))


def _event_periods(rng, p_any: float, n_periods: int) -> np.ndarray:
    """Indices of periods with at least one detection (Bernoulli process)."""
    if p_any <= 0:
        return np.zeros(0, np.int64)
    if p_any >= 1:
        return np.arange(n_periods, dtype=np.int64)
    expected = n_periods * p_any
    chunks = []
    last = -1
    while True:
        n = int(expected + 6 * math.sqrt(expected) + 16)
        idx = last + np.cumsum(rng.geometric(p_any, size=n), dtype=np.int64)
        chunks.append(idx[idx < n_periods])
        if idx[-1] >= n_periods:
            break
        last = int(idx[-1])
    return np.concatenate(chunks)


def _simulate_block(model: SourceReceiverModel, seed: int, block: int,
                    first_period: int, n_periods: int) -> TagStream:
    rng = _block_rng(seed, block)
    period = model.clock.period
    _, p1, p2 = model.photon_number_probabilities()
    a = model.detection_probabilities()
    a_tot = float(a.sum())
    w_single = p1 * a_tot
    w_one_of_two = p2 * 2 * a_tot * (1 - a_tot)
    w_both = p2 * a_tot**2
    p_any = w_single + w_one_of_two + w_both

    idx = _event_periods(rng, p_any, n_periods)
    n = len(idx)
    chans = []
    times = []
    if n:
        u = rng.random(n) * p_any
        both = u >= w_single + w_one_of_two
        from_pair = u >= w_single
        cum = np.cumsum(a / a_tot)
        ch1 = np.minimum(np.searchsorted(cum, rng.random(n), side="right"), N_CHANNELS - 1)
        t1 = sample_arrival_time(model.pulse, rng, n)
        t2 = sample_arrival_time(model.pulse, rng, n)
        if model.reexcitation_delay > 0:
            # the second photon follows the first after a re-excitation delay
            t2 = np.maximum(t1, t2) + rng.exponential(model.reexcitation_delay, n)
        # a lone detection from a two-photon pulse may be either photon
        pick_second = from_pair & ~both & (rng.random(n) < 0.5)
        t_first = np.where(pick_second, t2, t1)
        base = (first_period + idx) * period
        chans.append(ch1)
        times.append(base + t_first)
        n_both = int(both.sum())
        if n_both:
            ch2 = np.minimum(np.searchsorted(cum, rng.random(n_both), side="right"), N_CHANNELS - 1)
            chans.append(ch2)
            times.append(base[both] + t2[both])
    ch = np.concatenate(chans).astype(np.uint8) if chans else np.zeros(0, np.uint8)
    t = np.concatenate(times) if times else np.zeros(0)
    if len(t):
        sig = np.asarray(model.jitter_fwhm)[ch] * FWHM_TO_SIGMA
        t = t + rng.standard_normal(len(t)) * sig
    t = np.rint(t).astype(np.int64)

    t0 = first_period * period
    span = n_periods * period
    dark_ch, dark_t = [], []
    for c, rate in enumerate(model.dark_rate):
        k = rng.poisson(rate * span * 1e-12) if rate > 0 else 0
        dark_ch.append(np.full(k, c, np.uint8))
        dark_t.append(t0 + rng.integers(0, span, size=k, dtype=np.int64))
    ch = np.concatenate([ch, *dark_ch])
    t = np.concatenate([t, *dark_t])
    np.maximum(t, 0, out=t)
    return TagStream(ch, t)


def apply_dead_time(stream: TagStream, dead_time: int) -> TagStream:
    """Drop tags arriving within ``dead_time`` after a kept tag of the same channel."""
    if dead_time <= 0 or len(stream) == 0:
        return stream
    keep = np.ones(len(stream), dtype=bool)
    for c in range(N_CHANNELS):
        pos = np.flatnonzero(stream.channels == c)
        ts = stream.timestamps[pos]
        close = np.flatnonzero(np.diff(ts) < dead_time) + 1
        if not len(close):
            continue
        # a tag far from its predecessor is always kept, so only the crowded
        # ones need the sequential look-back
        kept = np.ones(len(ts), dtype=bool)
        for i in close.tolist():
            prev = i - 1
            while not kept[prev]:
                prev -= 1
            if ts[i] - ts[prev] < dead_time:
                kept[i] = False
        keep[pos[~kept]] = False
    return stream[keep]


def simulate(run: SimulationRun, threads: int = 1) -> TagStream:
    """Generate the time-sorted detection stream for ``run``."""
    model = run.model
    total = run.n_periods
    starts = list(range(0, total, BLOCK_PERIODS))
    jobs = [(model, run.seed, b, s, min(BLOCK_PERIODS, total - s)) for b, s in enumerate(starts)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda j: _simulate_block(*j), jobs))
    else:
        parts = [_simulate_block(*j) for j in jobs]
    stream = TagStream.concatenate(parts)
    return apply_dead_time(stream, model.dead_time)


def write_run_metadata(path, run: SimulationRun, stream: TagStream, extra: dict | None = None) -> None:
    meta = {
        "seed": run.seed,
        "duration_s": run.duration,
        "model": run.model.to_dict(),
        "model_sha256": run.model.digest(),
        "n_tags": len(stream),
        "tags_per_channel": {c.name: int(n) for c, n in zip(Channel, stream.counts())},
    }
    if extra:
        meta.update(extra)
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def with_g2(model: SourceReceiverModel, g2: float) -> SourceReceiverModel:
    return replace(model, g2_target=g2)
