import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record and assert one acceptance criterion."""

    def check(number, ok, detail):
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print("\n" + line)
        assert ok, detail

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
