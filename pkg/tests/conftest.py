import os

import pytest

_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion")
    config.addinivalue_line("markers", "extended: long run, enabled by ATOMPRIOR_EXTENDED=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("ATOMPRIOR_EXTENDED") == "1":
        return
    skip = pytest.mark.skip(reason="set ATOMPRIOR_EXTENDED=1 to run")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


class Reporter:
    """Collects one PASS/FAIL line per acceptance check."""

    def __call__(self, criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}"
        _LINES.append(line)
        print(line)
        return ok


@pytest.fixture
def report():
    return Reporter()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _LINES:
        terminalreporter.write_line(line)
