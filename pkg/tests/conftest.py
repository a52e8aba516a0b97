import numpy as np
import pytest

from crashforest import cart, prep, synthgen
from crashforest.schema import filter_head_on_front, select_model_variables

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _criterion_of.get(report.nodeid)
    if marker is None:
        return
    number, title = marker
    ok = report.outcome == "passed"
    prev = _criteria.get(number)
    _criteria[number] = (title, ok if prev is None else prev[1] and ok)


_criterion_of = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criterion_of[item.nodeid] = m.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}  {'PASS' if ok else 'FAIL'}  {title}")
    terminalreporter.write_line(f"pruned trees checked for non-increasing prune-set errors: {PRUNE_CHECKS['count']}")


PRUNE_CHECKS = {"count": 0}
_raw_prune = cart.prune


def _checked_prune(tree, rows, y):
    pruned = _raw_prune(tree, rows, y)
    if len(y):
        before, after = cart.misclassified(tree, rows, y), cart.misclassified(pruned, rows, y)
        assert after <= before, f"pruning raised prune-set errors {before} -> {after}"
    assert pruned.node_count <= tree.node_count
    PRUNE_CHECKS["count"] += 1
    return pruned


@pytest.fixture(autouse=True)
def prune_never_hurts(monkeypatch):
    """Every in-process prune must not raise misclassification on its prune rows."""
    monkeypatch.setattr(cart, "prune", _checked_prune)


@pytest.fixture(scope="session")
def planted():
    """Default planted synthetic set: (records, truth)."""
    return synthgen.generate(synthgen.GeneratorSpec())


@pytest.fixture(scope="session")
def planted_dataset(planted):
    records, _ = planted
    return prep.encode(select_model_variables(filter_head_on_front(records)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
