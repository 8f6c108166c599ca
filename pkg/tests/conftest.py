import pytest

_GATE = pytest.StashKey[dict]()


@pytest.fixture
def gate(request):
    """Record one acceptance line per criterion, then assert it."""
    results = request.config.stash.setdefault(_GATE, {})

    def check(num: int, title: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {title} -- {detail}"
        results[num] = line
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_GATE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
