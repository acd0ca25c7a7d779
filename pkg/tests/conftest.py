import hypothesis
import pytest

from drsim.scenario_io import builtin_scenario

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

S1_WTPS = [round(0.11 + 0.01 * i, 2) for i in range(10)]
P_STAR_S1 = 1.55 ** 0.8


@pytest.fixture
def s1():
    return builtin_scenario("S1")


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
