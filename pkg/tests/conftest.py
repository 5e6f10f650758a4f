import numpy as np
import pytest

from photon_hbt.config import RunConfig
from photon_hbt.sequence import default_timeline


@pytest.fixture(scope="session")
def timeline():
    return default_timeline()


@pytest.fixture(scope="session")
def run_config():
    return RunConfig()


@pytest.fixture(scope="session")
def warm_numba(run_config):
    """Compile the jitted kernels once so timed tests see steady state."""
    from photon_hbt import cross_correlate, simulate_stream

    exp = run_config.experiment
    stream = simulate_stream(exp.emitter(), exp.detector(), exp.timeline(),
                             n_ions=1, duration_ps=1_250_000_000, seed=0)
    cross_correlate(stream, tau_min_ps=-1_000_000, tau_max_ps=1_000_000)
    return True


def make_stream(channels, times, duration_ps, rep_period_ps=1_250_000):
    """Build a TagStream from unsorted tag arrays (test helper)."""
    from photon_hbt import TagStream

    channels = np.asarray(channels, dtype=np.uint8)
    times = np.asarray(times, dtype=np.int64)
    order = np.lexsort((channels, times))
    return TagStream(duration_ps=int(duration_ps), rep_period_ps=int(rep_period_ps),
                     channels=channels[order], times=times[order])
