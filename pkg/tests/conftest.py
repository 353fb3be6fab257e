import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ecogscreen.dataset import Condition, Recording, StimEvent
from ecogscreen.synth import SynthConfig, generate_cohort

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_recording(n=12000, c=4, events=((1000, 4000, 11), (6000, 9000, 12)), condition="real", pid="p1",
                   seed=0, srate=1000):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, c)).astype(np.float32)
    return Recording(pid, Condition(condition), srate, v, tuple(StimEvent(*e) for e in events))


@pytest.fixture
def recording():
    return make_recording()


@pytest.fixture(scope="session")
def small_cohort():
    """Three participants (delta 0, 0.5, 1) with the minimum event count."""
    cfg = SynthConfig(deltas=(0.0, 0.5, 1.0), events_per_condition=20, channels=8, active_channels=2, seed=7)
    return cfg, generate_cohort(cfg)


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line, print it, and fail the test when the criterion is not met."""
    def record(number, ok, detail):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"ACCEPTANCE {number}: {status}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        if ok is None:
            pytest.skip(detail)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
