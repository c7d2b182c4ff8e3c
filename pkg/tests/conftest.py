import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    num = int(name.split("_")[2])
    if report.when == "call" or report.outcome != "passed":
        prev = _criteria.get(num)
        if prev is None or prev[0] == "PASS":
            _criteria[num] = ("PASS" if report.outcome == "passed" else "FAIL", name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        verdict, name = _criteria[num]
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  ({name})")


@pytest.fixture
def id_graph():
    from icmsm.graph import illness_death
    return illness_death()
