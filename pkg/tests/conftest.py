import pytest

# criterion id -> {"title", "outcomes", "details"}
CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        cid, title = mark.args
        entry = CRITERIA.setdefault(cid, {"title": title, "outcomes": [], "details": []})
        entry["outcomes"].append("passed" if rep.passed else rep.outcome)
        entry["details"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(CRITERIA, key=lambda c: int(c.lstrip("C"))):
        entry = CRITERIA[cid]
        ok = all(o == "passed" for o in entry["outcomes"])
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {cid} {entry['title']}"
                                    + (f" [{detail}]" if detail else ""))
