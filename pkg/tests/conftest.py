"""Shared pytest wiring: surface the release-gate verdict lines.

The gate tests in test_acceptance.py record one [PASS]/[FAIL] line per
release criterion; pytest's output capture would otherwise hide the lines
for passing tests, so they are replayed in the terminal summary.
"""

GATE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not GATE_LINES:
        return
    terminalreporter.section("release gate")
    for line in GATE_LINES:
        terminalreporter.write_line(line)
