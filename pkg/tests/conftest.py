import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from builders import PROCESSORS  # noqa: E402

_ACCEPTANCE = {}


@pytest.fixture
def processors_dir():
    return PROCESSORS


@pytest.fixture
def ledger_dir(tmp_path):
    return tmp_path / "ledger"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed:
        _ACCEPTANCE[n] = "FAIL"
    elif report.when == "call":
        _ACCEPTANCE.setdefault(n, "PASS")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"ACCEPTANCE {n} {_ACCEPTANCE[n]}")
