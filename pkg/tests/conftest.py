"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(key, title): acceptance criterion check")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = getattr(getattr(rep.longrepr, "reprcrash", None), "message", "error")
    key, title = mark.args
    item.config._criteria.setdefault(key[0], []).append((key, title, rep.passed, detail))


def pytest_terminal_summary(terminalreporter, config):
    crit = config._criteria
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(crit, key=int):
        parts = crit[number]
        ok = all(p[2] for p in parts)
        titles = ", ".join(dict.fromkeys(t for _, t, _, _ in parts))
        body = " | ".join(d if p else f"FAILED {d}" for _, _, p, d in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number} "
                                    f"({titles}): {body}")
