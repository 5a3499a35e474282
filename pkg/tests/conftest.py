import pytest

RESULTS = []


@pytest.fixture
def record():
    """Log one acceptance line; the lines are repeated in the terminal summary."""

    def _record(k, ok, detail, seconds):
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'}; {detail}; {seconds:.1f} s"
        RESULTS.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
