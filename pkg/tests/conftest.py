"""Collect the one-line verdicts of acceptance criteria and print them at the end of the run."""

_verdicts: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        verdict = "PASS" if report.passed else "FAIL"
        _verdicts.append((verdict, props["criterion"], props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for verdict, name, detail in _verdicts:
        terminalreporter.write_line(f"{verdict}  {name}" + (f"  ({detail})" if detail else ""))
