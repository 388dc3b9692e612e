"""Shared pytest plumbing: the acceptance verdict registry."""
import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict(capsys):
    """Record and print the PASS/FAIL line of one acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        VERDICTS[number] = (passed, detail)
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        passed, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")
