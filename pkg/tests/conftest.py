import collections

import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "forward-model identities",
    3: "representable-target convergence",
    4: "motion recovery",
    5: "ablation ordering",
    6: "metric self-tests",
    7: "determinism and formats",
}

_outcomes = collections.defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _outcomes[mark.args[0]].append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        runs = _outcomes.get(n)
        if not runs:
            tr.write_line(f"criterion {n} ({title}): NOT RUN")
            continue
        ok = all(passed for _, passed, _ in runs)
        failed = [name for name, passed, _ in runs if not passed]
        notes = " | ".join(d for _, _, d in runs if d)
        line = f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}"
        if failed:
            line += f" [failed: {', '.join(failed)}]"
        if notes:
            line += f" :: {notes}"
        tr.write_line(line)
