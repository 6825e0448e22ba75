import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_spd(rng, n, cond=50.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    vals = np.exp(rng.uniform(0.0, np.log(cond), n))
    return (q * vals) @ q.T


_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        verdict = "PASS" if rep.passed else "FAIL"
        _CRITERIA.append((marker.args[0], f"{verdict}  [{marker.args[0]:>2}] {marker.args[1]}  {detail}".rstrip()))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
