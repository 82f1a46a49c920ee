"""Shared pytest wiring: print the acceptance verdict block after the run.

The acceptance tests record one PASS/FAIL line per criterion in a registry;
emitting them from a terminal-summary hook keeps them visible regardless of
pytest's output capture mode.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
