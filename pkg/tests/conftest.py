import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by tests/test_acceptance.py, one (number, passed, detail) per criterion
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def uca10():
    from cogsel.geometry import make_uca

    return make_uca(10, 0.5)
