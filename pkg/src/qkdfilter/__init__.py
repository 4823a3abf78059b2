"""Simulation and analysis toolkit for temporally filtered single-photon BB84."""

from .core import (AcceptanceWindow, Channel, ClockConfig, FormatError, ParameterError, TagStream,
                   fold_timetags, read_timetag_file, write_timetag_file)
from .keyrate import KeyRateParams, WindowSetting, max_tolerable_loss, optimize_window, secret_rate
from .photonstats import correlate, estimate_g2, monitor_blocks
from .pulsemodel import PulseShape, SyntheticChannelModel
from .simulator import SimulationRun, SourceReceiverModel, expected_rates, simulate

__version__ = "0.1.0"
