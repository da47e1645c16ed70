import acceptance_log


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for code in sorted(acceptance_log.LINES, key=lambda c: int(c[1:])):
        terminalreporter.write_line(acceptance_log.LINES[code])
