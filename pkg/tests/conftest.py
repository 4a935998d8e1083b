"""Collects acceptance-criterion outcomes and prints one line per criterion at the end of the run."""

from collections import OrderedDict

ACCEPTANCE: "OrderedDict[str, list[tuple[str, str, str]]]" = OrderedDict()


def record(criterion: str, part: str, ok, detail: str = "") -> bool:
    """Store a sub-check result; ``ok`` may be True, False or None (skipped)."""
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    ACCEPTANCE.setdefault(criterion, []).append((part, status, detail))
    line = f"criterion {criterion} [{part}]: {status}" + (f"  ({detail})" if detail else "")
    print(line)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE, key=int):
        parts = ACCEPTANCE[criterion]
        statuses = {s for _, s, _ in parts}
        overall = "FAIL" if "FAIL" in statuses else ("SKIP" if statuses == {"SKIP"} else "PASS")
        terminalreporter.write_line(f"criterion {criterion}: {overall}")
        for part, status, detail in parts:
            terminalreporter.write_line(f"    {part}: {status}" + (f"  ({detail})" if detail else ""))
