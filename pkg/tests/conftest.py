import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    label = dict(report.user_properties).get("criterion")
    if label is None:
        return
    entry = _criteria.setdefault(str(label), {"ok": True, "notes": []})
    entry["ok"] &= report.outcome == "passed"
    note = dict(report.user_properties).get("detail")
    if note:
        entry["notes"].append(note)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")

    def key(label):
        digits = "".join(c for c in label if c.isdigit())
        return (int(digits or 0), label)

    for label in sorted(_criteria, key=key):
        entry = _criteria[label]
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {label}: {status}" + (f"  ({notes})" if notes else ""))


@pytest.fixture
def criterion(request):
    """Tag a test with an acceptance criterion; call ``criterion(label, detail)``."""

    def tag(label, detail=""):
        request.node.user_properties.append(("criterion", label))
        if detail:
            request.node.user_properties.append(("detail", detail))

    return tag


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
