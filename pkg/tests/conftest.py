import sys
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion.

    The body fills the yielded dict with measured values; they are echoed on
    the line either way, and a failing body still raises.
    """
    lines = request.config.stash[_LINES]

    @contextmanager
    def run(number, title):
        measured = {}
        try:
            yield measured
        except BaseException:
            lines.append(_line("FAIL", number, title, measured))
            raise
        lines.append(_line("PASS", number, title, measured))

    return run


def _line(status, number, title, measured):
    extra = ", ".join(f"{k}={v}" for k, v in measured.items())
    return f"{status} criterion {number}: {title}" + (f" [{extra}]" if extra else "")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
