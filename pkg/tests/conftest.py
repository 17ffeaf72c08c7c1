from pathlib import Path

import pytest

from yolo_slim.archgraph import build_yolov11n
from yolo_slim.prune import RULES, prune

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures" / "table2"


@pytest.fixture(scope="session")
def base():
    return build_yolov11n(80)


@pytest.fixture(scope="session")
def variants(base):
    return {v: prune(base, v) for v in RULES}


@pytest.fixture(scope="session")
def table2_dir():
    return FIXTURES


# one PASS/FAIL line per acceptance criterion in the terminal summary
_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        if report.when == "call" or name not in _acceptance:
            _acceptance[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in sorted(_acceptance.items()):
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}")
