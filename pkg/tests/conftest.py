import os
import sys

sys.path.insert(0, os.path.dirname(__file__))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    examples = getattr(mod, "EXAMPLES", None)
    if not results and not examples:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results or {}):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    for name, (ok, detail) in (examples or {}).items():
        terminalreporter.write_line(f"example {name}: {'PASS' if ok else 'FAIL'}  {detail}")
