import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((number, name, passed, detail))
    status = "PASS" if passed else "FAIL"
    line = f"ACCEPTANCE {number:2d} {status}  {name}"
    if detail:
        line += f"  [{detail}]"
    print(line, file=sys.stderr)
    assert passed, f"acceptance criterion {number} failed: {name} {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d}: {status}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running desk-scale training runs (still part of the default suite)"
    )
