import pytest

from povmap.data_io import Dataset
from povmap.synth import SynthConfig, generate_data
from povmap.taxonomy import default_hierarchy


@pytest.fixture(scope="session")
def hierarchy():
    return default_hierarchy()


@pytest.fixture(scope="session")
def small_synth():
    """60 clusters of default synthetic data: (dataset, ground truth)."""
    surveys, dets, truth = generate_data(SynthConfig(n_clusters=60, seed=11))
    return Dataset(surveys, dets), truth


# -- acceptance criterion reporting ------------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "teardown":
        return
    for mark in item.iter_markers("criterion"):
        number, title = mark.args
        entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
        if report.failed:
            entry["ok"] = False
        if report.when == "call":
            entry["details"] += [str(v) for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        detail = "; ".join(entry["details"])
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number}: {entry['title']}" + (f" ({detail})" if detail else ""))
