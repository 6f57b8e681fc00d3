import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it."""
    def check(n: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        ACCEPTANCE[n] = line + (f"  [{detail}]" if detail else "")
        print(ACCEPTANCE[n])
        assert ok, detail
    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
