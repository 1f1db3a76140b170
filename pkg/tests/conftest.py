import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from dabn.evaluation import FoldModelCache
from dabn.suite import TARGET_USER, personalization_suite


@pytest.fixture(scope="session")
def personal():
    """Personalization suite with its fold model for the shifted target user."""
    suite = personalization_suite(0)
    model = FoldModelCache().get(suite.dataset, suite.arch, suite.hyper, TARGET_USER)
    idx = suite.dataset.user_indices(TARGET_USER)
    return suite, model, suite.dataset.windows[idx], suite.dataset.labels[idx]


_criteria = {}
_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _criteria[item.nodeid] = mark.args


def pytest_runtest_logreport(report):
    if report.nodeid in _criteria and (report.when == "call" or report.outcome != "passed"):
        _outcomes[report.nodeid] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (number, title) in sorted(_criteria.items(), key=lambda kv: kv[1][0]):
        if nodeid in _outcomes:
            terminalreporter.write_line(f"criterion {number}: {_outcomes[nodeid]}  {title}")
