"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

_CRITERIA = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    criterion = props.get("criterion")
    if criterion is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _CRITERIA[criterion] = (report.passed, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_CRITERIA):
        passed, detail = _CRITERIA[criterion]
        terminalreporter.write_line(f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}")
