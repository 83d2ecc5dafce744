import os
import sys

sys.path.insert(0, os.path.dirname(__file__))


def pytest_configure(config):
    # filled by the acceptance suite, printed at the end of the run
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    lines = getattr(terminalreporter.config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
