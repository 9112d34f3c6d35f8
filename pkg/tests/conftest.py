import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mrgbsde.engine import VolatilityBand  # noqa: E402

CRITERIA: dict[int, tuple[bool, str]] = {}


def record(number: int, ok: bool, detail: str) -> None:
    """Store the verdict of one acceptance criterion for the end-of-run summary."""
    CRITERIA[number] = (bool(ok), detail)


@pytest.fixture
def band():
    return VolatilityBand(0.25, 1.0)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
