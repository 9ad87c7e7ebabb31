import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criterion_report(request):
    """Record one ``criterion N PASS|FAIL: detail`` line; the lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(number, passed, detail):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
