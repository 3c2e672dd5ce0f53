def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance-criterion pass/fail lines after capture ends."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
