import numpy as np
import pytest

_criteria = {}
_notes = {}


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_setup(item):
    for mark in item.iter_markers("criterion"):
        item.user_properties.append(("criterion", *mark.args))


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for mark in report.user_properties:
        if mark[0] == "criterion":
            key = mark[1]
            prev = _criteria.get(key, (mark[2], "PASS"))[1]
            ok = report.outcome == "passed" and prev == "PASS"
            _criteria[key] = (mark[2], "PASS" if ok else "FAIL")
    if report.when == "call":
        for mark in report.user_properties:
            if mark[0] == "note":
                _notes.setdefault(mark[1], []).append(mark[2])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        desc, status = _criteria[key]
        terminalreporter.write_line(f"C{key:<3} {status}  {desc}")
        for note in _notes.get(key, []):
            for line in note.splitlines():
                terminalreporter.write_line(f"       {line}")
