import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def ems_home(tmp_path, monkeypatch):
    """Fresh state root for CLI and experiment tests."""
    home = tmp_path / "home"
    monkeypatch.setenv("EMS_HOME", str(home))
    monkeypatch.delenv("EMS_REGISTRY", raising=False)
    monkeypatch.setenv("EMS_CLOCK", "simulated")
    return home


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    wd = tmp_path / "work"
    wd.mkdir()
    monkeypatch.chdir(wd)
    return wd


def pytest_report_header(config):
    return f"ems tests, cwd={os.getcwd()}"


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or (report.when == "call" and number not in _CRITERIA):
        _CRITERIA[number] = (title, "FAIL" if failed else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
