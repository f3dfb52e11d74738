import pytest
from hypothesis import HealthCheck, settings

from edgecast.synthetic import SyntheticSpec

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60)
settings.load_profile("default")


@pytest.fixture
def small_spec():
    return SyntheticSpec(gop=12, packets_per_frame=3, frames=24)


@pytest.fixture
def desk_spec():
    # 116 packets per frame at 30 fps and a 2.75x reference frame gives
    # about 1.2 Mbps of reference and 4.8 Mbps of differential traffic
    return SyntheticSpec(gop=12, packets_per_frame=116, reference_multiplier=2.75, frames=36)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
