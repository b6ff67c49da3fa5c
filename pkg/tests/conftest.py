import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES = []


@pytest.fixture
def record(capsys):
    """Print and keep one ``criterion <id> PASS|FAIL <detail>`` line."""

    def emit(cid, ok, detail):
        line = f"criterion {cid:<4} {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)
