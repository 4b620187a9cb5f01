import pytest

from impmoe import tensor as T


@pytest.fixture(autouse=True)
def _clean_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()
    T.set_precision(32)


@pytest.fixture
def f64():
    with T.precision(64):
        yield


def rand_tensor(rng, *shape, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[report.nodeid] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, detail) in sorted(_ACCEPTANCE.items()):
        name = nodeid.split("::")[-1].removeprefix("test_")
        verdict = "PASS" if outcome == "passed" else "FAIL" if outcome == "failed" else outcome.upper()
        terminalreporter.write_line(f"{verdict:5s} {name}  {detail}")
