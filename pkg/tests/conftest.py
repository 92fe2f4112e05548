import pytest

_LINES: list[str] = []
_TRACES: list[tuple[str, object]] = []


@pytest.fixture(scope="session")
def ac_report():
    """Record one ``AC<n> PASS/FAIL: detail`` line; returns ``ok``."""

    def add(n, ok, detail):
        line = f"AC{n} {'PASS' if ok else 'FAIL'}: {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return add


@pytest.fixture(scope="session")
def solver_traces():
    """Session-wide list of ``(label, SolverTrace)`` for the hygiene check."""
    return _TRACES


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
