import warnings

import pytest

from mrhom.model import CoverageWarning

_CRITERIA: dict[str, tuple[str, str]] = {}


@pytest.fixture(autouse=True)
def _quiet_coverage():
    # the 8-pixel reference array deliberately does not span 3 sigma_k
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CoverageWarning)
        yield


@pytest.fixture
def criterion(request):
    """Register the test as an acceptance criterion: ``criterion("6", "summary")``."""
    def register(number: str, summary: str):
        _CRITERIA[request.node.nodeid] = (number, summary)
    return register


def pytest_runtest_logreport(report):
    if report.when == "call" and report.nodeid in _CRITERIA:
        number, summary = _CRITERIA[report.nodeid]
        _CRITERIA[report.nodeid] = (number, summary, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    done = [v for v in _CRITERIA.values() if len(v) == 3]
    if not done:
        return
    terminalreporter.section("acceptance criteria")
    for number, summary, outcome in sorted(done, key=lambda v: (int(v[0].rstrip("ab")), v[0])):
        terminalreporter.write_line(f"criterion {number:>3}: {outcome}  {summary}")
