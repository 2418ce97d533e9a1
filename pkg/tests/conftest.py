"""Shared pytest wiring: surface the acceptance verdicts after the run.

The acceptance tests record one PASS/FAIL line per criterion; printing them
inline would be swallowed by pytest's fd-level capture, so they are replayed
here in the terminal summary, which runs outside capture.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    for name in ("test_acceptance", "tests.test_acceptance"):
        module = sys.modules.get(name)
        if module is not None and getattr(module, "VERDICTS", None):
            terminalreporter.section("acceptance verdicts")
            for line in module.VERDICTS:
                terminalreporter.write_line(line)
            return
