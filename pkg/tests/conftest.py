import numpy as np
import pytest

from qkdfilter import presets
from qkdfilter.core import ClockConfig, TagStream
from qkdfilter.simulator import SimulationRun, simulate


@pytest.fixture(scope="session")
def clock():
    return ClockConfig(80e6)


@pytest.fixture(scope="session")
def testbed_stream():
    """60 s of the testbed preset (about 3 million tags)."""
    return simulate(SimulationRun(presets.TESTBED, 60.0, seed=20240601))


def random_stream(rng, n, span, n_channels=4):
    ts = np.sort(rng.integers(0, span, size=n))
    ch = rng.integers(0, n_channels, size=n)
    return TagStream(ch, ts)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
