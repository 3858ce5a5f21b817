import pytest

_acceptance_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and "test_acceptance" in item.nodeid:
        _acceptance_results.append(
            (item.nodeid.split("::")[-1], rep.passed, rep.duration)
        )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed, duration in _acceptance_results:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  ({duration:.1f}s)")
