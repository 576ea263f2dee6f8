import pytest

_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """Record an acceptance criterion outcome and fail the test if it did not pass."""
    def record(number, title, passed, detail=""):
        _CRITERIA[number] = (title, bool(passed), detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})")
        assert passed, f"criterion {number} failed: {title} ({detail})"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        terminalreporter.write_line(
            f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})")
