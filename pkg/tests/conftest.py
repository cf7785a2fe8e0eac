import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def criterion_report(request):
    """Record one ``PASS``/``FAIL`` line per acceptance criterion for the terminal summary."""
    lines = request.config.stash[_LINES_KEY]

    def report(number: int, ok: bool, detail: str) -> None:
        lines.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(lines[-1])

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_LINES_KEY, []), key=lambda s: int(s.split()[1].rstrip(":")))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
