import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hcml.dataio import SyntheticSpec, generate_split

settings.register_profile("hcml", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("hcml")

# 16x16 clips: small enough for minute-scale training, large enough for orbits
SMALL_SPEC = SyntheticSpec(height=16, width=16, radius=(2.5, 3.5), orbit_radius=(2.0, 3.0),
                           noise_sigma=0.01, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_split():
    return generate_split(SMALL_SPEC, 24, 12)


# acceptance results, filled by test_acceptance.py and printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
