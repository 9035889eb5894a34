import sys

import pytest

from ewsjf.workload import Request


@pytest.fixture
def make_request():
    counter = iter(range(10**9))

    def make(prompt_len, arrival=0.0, output_len=8, rid=None):
        return Request(rid or f"x{next(counter)}", prompt_len, output_len, arrival)

    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
