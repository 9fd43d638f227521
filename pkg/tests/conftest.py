from __future__ import annotations

import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    n, title = marker
    detail = dict(report.user_properties).get("measured", "")
    ok = report.outcome == "passed"
    prev = _CRITERIA.get(n)
    # a criterion passes only if every test carrying it passes
    entry = (title, (prev[1] if prev else True) and ok, [*(prev[2] if prev else []), detail] if detail else (prev[2] if prev else []))
    _CRITERIA[n] = entry


@pytest.fixture(autouse=True)
def _criterion_tag(request, record_property):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        record_property("criterion", tuple(m.args))


@pytest.fixture
def measured(record_property):
    """Call with a short string describing the measured value(s)."""
    notes = []

    def add(text):
        notes.append(str(text))
        record_property("measured", "; ".join(notes))

    return add


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[n]
        status = "PASS" if ok else "FAIL"
        extra = f" [{'; '.join(details)}]" if details else ""
        terminalreporter.write_line(f"criterion {n:>2} {status}: {title}{extra}")
