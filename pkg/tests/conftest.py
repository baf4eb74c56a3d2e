"""Shared pytest plumbing: the acceptance-criteria result banner.

tests/test_acceptance.py registers one line per criterion via record_criterion;
the terminal summary prints them all, pass or fail, so a single pytest run
shows the full acceptance picture at a glance.
"""

_CRITERIA: dict = {}


def record_criterion(number: int, name: str, passed: bool, detail: str = ""):
    _CRITERIA[number] = (name, passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, passed, detail = _CRITERIA[number]
        verdict = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d} {name}: {verdict}"
        if detail:
            line += f"  ({detail})"
        tr.write_line(line, green=passed, red=not passed)
