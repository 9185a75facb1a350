import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion number -> (title, passed, detail)
_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if rep.failed:
            reason = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else "error"
            detail = f"{detail}; {reason.splitlines()[0]}" if detail else reason.splitlines()[0]
        _ACCEPTANCE[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
