"""Shared pytest plumbing.

The acceptance tests append one human-readable pass/fail line per criterion
to ACCEPTANCE_LINES; echoing them in the terminal summary keeps the verdicts
visible even though pytest captures per-test stdout.
"""

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
