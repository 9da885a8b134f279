import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """``record(criterion, ok, detail)``: one pass/fail line in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(criterion, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
