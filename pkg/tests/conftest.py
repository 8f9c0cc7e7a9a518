from acceptance_report import REPORT


def pytest_terminal_summary(terminalreporter):
    """Repeat the one-line verdict of every acceptance criterion that ran."""
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for line in REPORT:
        terminalreporter.write_line(line)
