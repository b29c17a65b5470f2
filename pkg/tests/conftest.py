import math

import numpy as np
import pytest

from bayespim.core_model import Dataset, ScreeningRecord

FAMILIES = ("weibull", "loglogistic", "lognormal", "exponential")


def record(visits, r=1, zx=(1.0,), zw=(1.0,), rid=None):
    """Record from a visit tuple: censored when it ends in ``inf``, else an event."""
    visits = tuple(float(v) for v in visits)
    if math.isinf(visits[-1]):
        outcomes = (0,) * len(visits)
    else:
        outcomes = (0,) * (len(visits) - 1) + (1,)
    return ScreeningRecord(visits, outcomes, r, zx, zw, id=rid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def event_record():
    """Negative at 0 and 3, positive at 6."""
    return record((0, 3, 6))


@pytest.fixture
def mixed_dataset():
    recs = (
        record((0, 3, 6)),
        record((0, 2, math.inf)),
        record((0,)),
        record((0, 1.5, 4, 7.5), r=0),
        record((0, math.inf)),
        record((0, 5, math.inf), r=0),
    )
    return Dataset(recs, ("intercept",), ("intercept",))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
