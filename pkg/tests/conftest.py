import os
import time

import pytest
from hypothesis import HealthCheck, settings

from sentinel.harness import build_fixture

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=300, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def fx():
    with build_fixture(7) as fixture:
        yield fixture


@pytest.fixture
def user_cert(fx):
    def make(**kw):
        kw.setdefault("single_use", False)
        return fx.ims.mint_certificate(fx.user, fx.gateway.service_names(), fx.clock.now, 3_600_000,
                                       kw["single_use"]).encode()
    return make


# acceptance criteria report one line each at the end of the run

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of an acceptance criterion under its number and title."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    start = time.perf_counter()
    yield
    rep = getattr(request.node, "rep_call", None)
    passed = rep is not None and rep.passed
    _CRITERIA[number] = (title, passed, time.perf_counter() - start)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, elapsed = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {title} ({elapsed:.2f} s)")
