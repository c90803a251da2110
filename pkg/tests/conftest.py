import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted({r[0] for r in results}):
        rows = [r for r in results if r[0] == crit]
        ok = all(r[2] for r in rows)
        failed = [f"{r[1]}: {r[3]}" for r in rows if not r[2]]
        detail = "; ".join(failed) if failed else f"{len(rows)} checks"
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'} ({detail})")
