"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""

import re
from collections import OrderedDict

_results: "OrderedDict[str, list]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion this test checks, e.g. '7a'")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", str(mark.args[0])))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    cid = props.get("criterion")
    if cid is None:
        return
    failed = report.failed
    if report.when == "call" or failed:
        _results.setdefault(cid, []).append((report.when, not failed, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    groups: "OrderedDict[str, list]" = OrderedDict()
    for cid in sorted(_results, key=lambda c: (int(re.match(r"\d+", c).group()), c)):
        groups.setdefault(re.match(r"\d+", cid).group(), []).append(cid)
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num, cids in groups.items():
        parts = []
        ok_all = True
        for cid in cids:
            ok = all(ok for _, ok, _ in _results[cid])
            ok_all &= ok
            detail = "; ".join(d for _, _, d in _results[cid] if d)
            label = cid if len(cids) > 1 or cid != num else ""
            text = f"{label} {'PASS' if ok else 'FAIL'}".strip() if label else ""
            if detail:
                text = f"{text} ({detail})" if text else detail
            if text:
                parts.append(text)
        line = f"criterion {num}: {'PASS' if ok_all else 'FAIL'}"
        if parts:
            line += "  [" + " | ".join(parts) + "]"
        tr.write_line(line)
