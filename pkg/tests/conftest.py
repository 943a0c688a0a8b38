import pytest

# one (criterion, status, detail) triple per acceptance criterion, printed at the end
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def record(number, ok, detail, status=None):
        status = status or ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2}: {status} - {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
