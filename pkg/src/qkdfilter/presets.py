"""Named parameter sets for the testbed and the four synthetic filtering cases."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .core import ClockConfig
from .keyrate import KeyRateParams, WindowSetting
from .pulsemodel import FIG5_BIN_WIDTH, PulseShape, SyntheticChannelModel, calibrate_signal_area, emg_cdf
from .simulator import SourceReceiverModel

CLOCK = ClockConfig(80e6)

# Error-correction inefficiency used with every named set. One value is shared
# between the testbed rate-loss curves and the synthetic cases.
PRESET_F_EC = 1.20

# testbed source and receiver
TESTBED_MU = 0.0043
TESTBED_G2 = 0.089
TESTBED_P_DC = 1.22e-6
TESTBED_QBER_FLOOR = 0.0048
TESTBED_EFFICIENCY = 0.1424
TESTBED_JITTER_FWHM = 550.0
TESTBED_DARK_RATE = 24.4
TESTBED_PULSE = PulseShape(decay_time=750.0, irf_fwhm=0.0, origin=2000.0)

TESTBED = SourceReceiverModel(
    clock=CLOCK,
    mu=TESTBED_MU,
    g2_target=TESTBED_G2,
    pulse=TESTBED_PULSE,
    efficiency=TESTBED_EFFICIENCY,
    jitter_fwhm=TESTBED_JITTER_FWHM,
    dark_rate=TESTBED_DARK_RATE,
    crosstalk=TESTBED_QBER_FLOOR,
)

# second photon emitted after a delayed re-excitation, so temporal filtering
# also lowers the measured g2
TESTBED_REEXCITATION = replace(TESTBED, reexcitation_delay=1500.0)

TESTBED_KEYRATE = KeyRateParams(
    mu=TESTBED_MU, g2=TESTBED_G2, p_dc=TESTBED_P_DC, q=TESTBED_QBER_FLOOR,
    f_ec=PRESET_F_EC, clock=CLOCK,
)

# window widths (ps) of the three rate-loss curves
TESTBED_WINDOWS = {"full": None, "1ns": 1000, "0.25ns": 250}


def testbed_window_setting(width: int | None, center: int = 0) -> WindowSetting:
    """Expected sifted fraction of a window on the testbed arrival profile.

    The window is placed relative to the centre of the most populated 25 ps
    bin of the jitter-broadened pulse, as it would be on measured data; the
    QBER floor stays at the preset value.
    """
    if width is None:
        return WindowSetting()
    shape = TESTBED_PULSE.broadened(TESTBED_JITTER_FWHM)
    edges = np.arange(0, CLOCK.period + FIG5_BIN_WIDTH, FIG5_BIN_WIDTH, dtype=float)
    mass = np.diff(emg_cdf(shape, edges))
    i = int(np.argmax(mass))
    peak = (edges[i] + edges[i + 1]) / 2
    start = peak + center - width // 2

    frac = float(emg_cdf(shape, start + width) - emg_cdf(shape, start))
    return WindowSetting(frac, width)

# synthetic filtering cases: (decay time ps, noise offset per 25 ps bin)
FIG5_IRF_FWHM = 500.0
FIG5_CROSSTALK = 0.01
FIG5_SNR_PAIRS = ((0.01, 392.0), (0.3, 13.0))
FIG5_SIGNAL_AREA = calibrate_signal_area(FIG5_SNR_PAIRS, CLOCK.period, FIG5_BIN_WIDTH)
FIG5_CASES = {
    "fig5-case1": (500.0, 0.01),
    "fig5-case2": (500.0, 0.3),
    "fig5-case3": (1500.0, 0.01),
    "fig5-case4": (1500.0, 0.3),
}
# nominal gains of the optimal window over the unfiltered one
FIG5_REFERENCE_GAINS = {
    "fig5-case1": 0.025, "fig5-case2": 1.845, "fig5-case3": 0.060, "fig5-case4": 1.483,
}
# the synthetic cases carry no multi-photon or dark-count term of their own;
# all errors come from the histograms
FIG5_KEYRATE = KeyRateParams(mu=1.0, g2=0.0, p_dc=0.0, q=0.0, f_ec=PRESET_F_EC, clock=CLOCK)


def fig5_model(name: str) -> SyntheticChannelModel:
    decay, offset = FIG5_CASES[name]
    # the pulse sits in the middle of the period so the 3-pulse train is centred
    shape = PulseShape(decay, FIG5_IRF_FWHM, origin=CLOCK.period / 2)
    return SyntheticChannelModel(shape, FIG5_CROSSTALK, offset, 3, CLOCK.period, FIG5_SIGNAL_AREA)


SIMULATION_PRESETS = {"testbed": TESTBED, "testbed-reexcitation": TESTBED_REEXCITATION}
SYNTHETIC_PRESETS = tuple(FIG5_CASES)
ALL_PRESETS = tuple(SIMULATION_PRESETS) + SYNTHETIC_PRESETS
