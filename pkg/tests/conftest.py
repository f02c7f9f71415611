import pytest

_LINES = []


class AcceptanceRecorder:
    """Collects one summary line per acceptance criterion."""

    def record(self, number, name, value, tol, passed, note=""):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number} {name}: measured {value} tolerance {tol} {status}"
        if note:
            line += f" ({note})"
        _LINES.append((number, line))
        return passed


@pytest.fixture
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(line)
