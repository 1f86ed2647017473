import re

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq, n, sample_rate=44100, amp=0.5, phase=0.0):
    t = np.arange(n) / sample_rate
    return amp * np.sin(2 * np.pi * freq * t + phase)



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    ran = {}
    for outcome in ("passed", "failed", "error"):
        for r in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(r, "nodeid", ""))
            if m:
                ran[int(m.group(1))] = outcome
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ran):
        terminalreporter.write_line(ACCEPTANCE_LINES.get(n, f"FAIL criterion {n:2d} did not run to completion"))
