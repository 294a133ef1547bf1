import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record the one-line verdict of an acceptance criterion."""
    def record(number: int, checks: list[tuple[str, bool, str]]):
        ok = all(passed for _, passed, _ in checks)
        detail = "; ".join(f"{name} {'ok' if passed else 'FAIL'} ({info})" for name, passed, info in checks)
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        failed = [name for name, passed, _ in checks if not passed]
        assert not failed, f"criterion {number} failed: {', '.join(failed)}"
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
