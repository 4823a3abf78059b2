"""Secret key rate of single-photon BB84 with temporal filtering.

Per clock pulse, for a window that keeps a fraction ``F`` of the clicks and
has width ``dt``::

    p_signal = mu * F * eta_bob * 10**(-loss/10)
    p_dc     = p_dc_full * dt / period
    p_click  = p_signal + p_dc - p_signal * p_dc
    e        = (q * p_signal + p_dc / 2) / p_click
    p_m      = (mu * F)**2 * g2 / 2
    beta     = (p_click - p_m) / p_click
    S        = p_click / 2 * (beta * tau(e / beta) - f * h(e))

with ``tau(e) = 1 - log2(1 + 4e - 4e**2)`` and ``h`` the binary entropy.
Negative ``S`` is reported as 0 (no key).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .core import ClockConfig, ParameterError
from .filtering import FilterMetrics, SweepGrid

UNBOUNDED = math.inf
MAX_LOSS_DB = 300.0


def shannon_entropy(e):
    """Binary entropy in bits, with h(0) = h(1) = 0."""
    e = np.asarray(e, dtype=float)
    if np.any((e < 0) | (e > 1)):
        raise ParameterError("error rate must be in [0, 1]")
    inner = (e > 0) & (e < 1)
    safe = np.where(inner, e, 0.5)
    out = np.where(inner, -safe * np.log2(safe) - (1 - safe) * np.log2(1 - safe), 0.0)
    return out if out.ndim else float(out)


def compression_tau(e):
    """Fraction of the sifted key surviving privacy amplification."""
    e = np.asarray(e, dtype=float)
    if np.any(e < 0):
        raise ParameterError("error rate must be non-negative")
    inner = np.minimum(e, 0.5)
    out = np.where(e < 0.5, 1 - np.log2(1 + 4 * inner - 4 * inner**2), 0.0)
    return out if out.ndim else float(out)


def multiphoton_bound(mu: float, g2: float) -> float:
    """Upper bound on the probability of two or more photons per pulse."""
    if mu < 0 or g2 < 0:
        raise ParameterError("mu and g2 must be non-negative")
    return mu * mu * g2 / 2


@dataclass(frozen=True)
class KeyRateParams:
    mu: float
    g2: float
    p_dc: float
    q: float
    f_ec: float = 1.22
    eta_bob: float = 1.0
    clock: ClockConfig = field(default_factory=ClockConfig)
    tau_argument: str = "e/beta"
    filtered_multiphoton: bool = True

    def __post_init__(self):
        if self.mu < 0 or self.g2 < 0:
            raise ParameterError("mu and g2 must be non-negative")
        for name in ("p_dc", "q", "eta_bob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ParameterError(f"{name} must be a probability")
        if self.f_ec < 1:
            raise ParameterError("f_ec must be >= 1")
        if self.tau_argument not in ("e/beta", "e"):
            raise ParameterError("tau_argument must be 'e/beta' or 'e'")


@dataclass(frozen=True)
class WindowSetting:
    """What the key-rate model needs from an acceptance window.

    ``qber_floor`` of ``None`` falls back to ``KeyRateParams.q``; ``width`` of
    ``None`` means the full period.
    """

    sifted_fraction: float = 1.0
    width: int | None = None
    qber_floor: float | None = None

    @classmethod
    def from_metrics(cls, m: FilterMetrics) -> "WindowSetting":
        return cls(m.sifted_fraction, m.window.width, m.qber)


FULL_WINDOW = WindowSetting()


@dataclass
class RatePoint:
    loss_db: float
    s_per_pulse: float
    qber: float
    p_click: float
    marker: str = "ok"

    def bits_per_second(self, clock: ClockConfig) -> float:
        return self.s_per_pulse * clock.repetition_rate


def secret_rate(params: KeyRateParams, loss_db: float, window: WindowSetting = FULL_WINDOW) -> RatePoint:
    period = params.clock.period
    width = period if window.width is None else window.width
    q = params.q if window.qber_floor is None else window.qber_floor
    F = window.sifted_fraction
    mu_window = params.mu * F
    p_signal = mu_window * params.eta_bob * 10 ** (-loss_db / 10)
    p_dc = params.p_dc * width / period
    p_click = p_signal + p_dc - p_signal * p_dc
    if p_click <= 0:
        return RatePoint(loss_db, 0.0, math.nan, 0.0, "no clicks")
    e = (q * p_signal + p_dc / 2) / p_click
    p_m = multiphoton_bound(mu_window if params.filtered_multiphoton else params.mu, params.g2)
    beta = (p_click - p_m) / p_click
    if beta <= 0:
        return RatePoint(loss_db, 0.0, e, p_click, "multi-photon dominated")
    arg = e / beta if params.tau_argument == "e/beta" else e
    s = p_click / 2 * (beta * compression_tau(arg) - params.f_ec * shannon_entropy(min(e, 1.0)))
    if s <= 0:
        return RatePoint(loss_db, 0.0, e, p_click, "no key")
    return RatePoint(loss_db, float(s), e, p_click)


def rate_curve(params: KeyRateParams, losses, window: WindowSetting = FULL_WINDOW) -> list[RatePoint]:
    return [secret_rate(params, float(L), window) for L in losses]


def max_tolerable_loss(params: KeyRateParams, window: WindowSetting = FULL_WINDOW,
                       tol: float = 1e-6) -> float:
    """Largest channel loss (dB) with a positive key; ``inf`` if never reached."""
    def s(L):
        return secret_rate(params, L, window).s_per_pulse

    if s(0.0) <= 0:
        return 0.0
    if s(MAX_LOSS_DB) > 0:
        return UNBOUNDED
    lo, hi = 0.0, MAX_LOSS_DB
    # S is unimodal in the loss; find the last positive point by bisection
    coarse = np.arange(0.0, MAX_LOSS_DB + 1, 1.0)
    vals = np.array([s(L) for L in coarse])
    last = int(np.flatnonzero(vals > 0)[-1])
    lo, hi = coarse[last], coarse[last + 1]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if s(mid) > 0:
            lo = mid
        else:
            hi = mid
    return lo


def critical_mu(p_dc: float, g2: float) -> float:
    """Mean photon number at which dark counts and multi-photon pulses limit alike."""
    if g2 < 0 or p_dc < 0:
        raise ParameterError("p_dc and g2 must be non-negative")
    if g2 == 0:
        return UNBOUNDED
    return math.sqrt(2 * p_dc / g2)


def best_mu_tolerable_loss(params: KeyRateParams, window: WindowSetting = FULL_WINDOW,
                           mu_max: float = 1.0) -> tuple[float, float]:
    """Maximal tolerable loss over mean photon numbers up to ``mu_max``.

    Models a source of efficiency ``mu_max`` that may be attenuated freely.
    Returns ``(mu, loss_db)``.
    """
    def neg(log_mu):
        return -max_tolerable_loss(replace(params, mu=float(np.exp(log_mu))), window, tol=1e-4)

    grid = np.linspace(np.log(1e-5), np.log(mu_max), 60)
    vals = np.array([neg(x) for x in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-4})
    x = res.x if res.fun <= vals[i] else grid[i]
    return float(np.exp(x)), -float(min(res.fun, vals[i]))


def distance_extension(loss_db_a: float, loss_db_b: float, atten_db_per_km: float):
    """Return ``(extension_km, distance_a_km, distance_b_km)`` for a fibre attenuation."""
    if atten_db_per_km <= 0:
        raise ParameterError("attenuation must be positive")
    return ((loss_db_b - loss_db_a) / atten_db_per_km,
            loss_db_a / atten_db_per_km,
            loss_db_b / atten_db_per_km)


@dataclass
class WindowOptimum:
    width: int
    center: int
    s_best: float
    s_full: float
    s_map: np.ndarray
    markers: np.ndarray

    @property
    def gain(self) -> float:
        """Relative secret-key gain of the best window over the full window."""
        if self.s_full <= 0:
            return math.inf if self.s_best > 0 else 0.0
        return self.s_best / self.s_full - 1


def grid_rates(grid: SweepGrid, params: KeyRateParams, loss_db: float = 0.0):
    """Secret rate and marker of every sweep cell."""
    s = np.zeros(grid.shape)
    markers = np.empty(grid.shape, dtype=object)
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            m = grid.cell(i, j)
            if m.empty:
                markers[i, j] = "empty window"
                continue
            pt = secret_rate(params, loss_db, WindowSetting.from_metrics(m))
            s[i, j] = pt.s_per_pulse
            markers[i, j] = pt.marker
    return s, markers


def optimize_window(grid: SweepGrid, params: KeyRateParams, loss_db: float = 0.0,
                    g2_filtered: float | None = None) -> WindowOptimum:
    """Best (width, centre) cell of a sweep.

    By default g2 stays at its unfiltered value; ``g2_filtered`` substitutes a
    filtered estimate, which is only safe if Alice also gates her emission.
    Ties go to the wider window, then to the centre closest to the peak.
    """
    if g2_filtered is not None:
        params = replace(params, g2=g2_filtered)
    s, markers = grid_rates(grid, params, loss_db)
    w = np.broadcast_to(grid.widths[:, None], grid.shape)
    c = np.broadcast_to(np.abs(grid.centers)[None, :], grid.shape)
    order = np.lexsort((c.ravel(), -w.ravel(), -s.ravel()))
    i, j = np.unravel_index(order[0], grid.shape)
    full = grid.full_window()
    s_full = secret_rate(params, loss_db, WindowSetting(1.0, grid.period, full.qber)).s_per_pulse
    return WindowOptimum(int(grid.widths[i]), int(grid.centers[j]), float(s[i, j]), s_full, s, markers)


def poisson_p1(mu: float) -> float:
    return mu * math.exp(-mu)


@dataclass
class WCPComparison:
    sps_p1_lower: float
    wcp_p1: float
    break_even_mu: float
    margin: float

    @property
    def sps_wins(self) -> bool:
        return self.margin > 0


def wcp_comparison(mu_sps: float, g2: float, mu_wcp: float = 0.5,
                   wcp_p1: float | None = None) -> WCPComparison:
    """Compare a sub-Poissonian source with a weak coherent pulse source.

    ``wcp_p1`` overrides the Poissonian single-photon probability of the
    WCP reference. The break-even is the smallest ``mu`` with
    ``mu - mu**2 * g2`` equal to it.
    """
    ref = poisson_p1(mu_wcp) if wcp_p1 is None else wcp_p1
    lower = mu_sps - mu_sps**2 * g2
    if g2 == 0:
        even = ref
    else:
        disc = 1 - 4 * g2 * ref
        even = math.nan if disc < 0 else (1 - math.sqrt(disc)) / (2 * g2)
    return WCPComparison(lower, ref, even, lower - ref)


def write_rate_curve(path, points: list[RatePoint], clock: ClockConfig, header: dict | None = None) -> None:
    with open(path, "w", newline="") as f:
        for k, v in (header or {}).items():
            f.write(f"# {k}={v}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["loss_db", "qber", "p_click", "secret_bits_per_pulse", "secret_bits_per_second"])
        for p in points:
            w.writerow([repr(float(p.loss_db)), repr(float(p.qber)), repr(float(p.p_click)),
                        repr(p.s_per_pulse), repr(p.bits_per_second(clock))])
