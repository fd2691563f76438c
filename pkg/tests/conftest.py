import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatstream.synth import random_cloud

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cloud(rng):
    return random_cloud(200, rng, extent=2.0, sh_rest_std=0.1)


# acceptance results, filled by tests/test_acceptance.py and printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[num]
        ok = all(p["ok"] for p in parts)
        secs = sum(p["secs"] for p in parts)
        detail = "; ".join(p["detail"] for p in parts if p["detail"])
        terminalreporter.write_line(
            f"criterion {num:>2}: {'PASS' if ok else 'FAIL'} ({secs:.1f}s) {detail}")
