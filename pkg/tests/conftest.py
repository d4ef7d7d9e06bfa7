import os
import re
import sys

sys.path.insert(0, os.path.dirname(__file__))

from _verdicts import VERDICTS  # noqa: E402


def _order(v):
    num, rest = re.match(r"(\d+)(.*)", v[0]).groups()
    return int(num), rest


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(VERDICTS, key=_order):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {num:<4} {title}: {detail}")
