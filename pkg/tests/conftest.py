import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, label): release acceptance criterion; prints a pass/fail line",
    )
    config._criterion_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, label = marker.args
    results = item.config._criterion_results
    entry = results.setdefault(num, {"label": label, "passed": True})
    entry["passed"] &= report.passed


def pytest_sessionfinish(session, exitstatus):
    results = getattr(session.config, "_criterion_results", {})
    if not results:
        return
    print("\n" + "-" * 64)
    print("acceptance criteria")
    for num in sorted(results):
        entry = results[num]
        verdict = "PASS" if entry["passed"] else "FAIL"
        print(f"  criterion {num:>2}  {verdict}  {entry['label']}")
    print("-" * 64)
