import pytest

ACCEPTANCE = pytest.StashKey[dict]()
NUM_CRITERIA = 10


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records the result line for acceptance criterion ``n`` and asserts it."""
    lines = request.config.stash[ACCEPTANCE]

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[ACCEPTANCE]
    ran = any(
        "test_acceptance" in rep.nodeid
        for key in ("passed", "failed", "error")
        for rep in terminalreporter.stats.get(key, [])
    )
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, NUM_CRITERIA + 1):
        terminalreporter.write_line(lines.get(n, f"criterion {n:2d}: FAIL  (not evaluated: error before the check)"))
