import pytest

# criterion number -> (passed, detail), filled in by the acceptance tests
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion(request):
    """Call ``criterion(n, detail)`` before asserting; the outcome is recorded on teardown."""
    state = {}

    def record(n, detail):
        state.update(n=n, detail=detail)

    yield record
    if "n" in state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        ACCEPTANCE[state["n"]] = (ok, state["detail"])
        print(f"criterion {state['n']}: {'PASS' if ok else 'FAIL'}  {state['detail']}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep
