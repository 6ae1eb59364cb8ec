import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Log one PASS/FAIL line per acceptance criterion; printed again in the terminal summary."""
    lines = request.config.stash[_LINES]

    def report(label, checks):
        ok = all(passed for _, passed in checks)
        detail = "; ".join(f"{name}{'' if passed else ' (FAIL)'}" for name, passed in checks)
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
