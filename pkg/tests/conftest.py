import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(number, passed, detail)."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number, passed, detail):
        results[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(results[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
