import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lakd.data import synth_generate
from lakd.models import build_tapnet, save_checkpoint

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_teacher_path(tmp_path_factory):
    """An untrained depth-6 width-8 net saved to disk; enough for plumbing tests."""
    path = tmp_path_factory.mktemp("teacher") / "teacher.ckpt"
    save_checkpoint(build_tapnet(6, 8, 3, seed=7, input_size=12), path)
    return path


@pytest.fixture(scope="session")
def small_data():
    return synth_generate(num_classes=3, samples=120, image_size=12, seed=3)


# acceptance report ------------------------------------------------------------------------
# Tests marked ``criterion(n, "title")`` get one PASS/FAIL line in the terminal
# summary, followed by any ``record_property("detail", ...)`` text.

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    n, title = mark.args
    _criteria[n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, title, detail = _criteria[n]
        line = f"criterion {n:2d}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
