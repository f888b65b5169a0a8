import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("repo", deadline=None, max_examples=50)
settings.load_profile("repo")

from splitreuse.harness.config import RunConfig  # noqa: E402


def tiny_config(**kw) -> RunConfig:
    """A few-second configuration: 2 clients x 2 steps, short pre-training."""
    base = dict(epochs=2, clients=2, samples=40, batch_size=10, val_size=20, test_size=20,
                pretrain_samples=200, pretrain_steps=20)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


# ---- acceptance reporting -------------------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, "title")`` get one PASS/FAIL line in the terminal
# summary; ``record_property("detail", ...)`` adds the measured numbers to that line.

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    prev = _CRITERIA.get(n)
    passed = rep.passed and (prev is None or prev[1])
    _CRITERIA[n] = (title, passed, detail or (prev[2] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[n]
        line = f"criterion {n:>2} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
