from __future__ import annotations

import os
from collections.abc import Sequence
from typing import Any

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def rec(tpl: str, file: str, name: str, tokens: Sequence[str], callees: Sequence[str] = ()) -> dict[str, Any]:
    return {"tpl": tpl, "file": file, "name": name, "tokens": list(tokens), "callees": list(callees)}


def body(name: str, *extra: str) -> list[str]:
    """A tiny C function whose token stream is unique per (name, extra)."""
    return ["int", name, "(", ")", "{", "return", *extra, ";", "}"]


def pytest_terminal_summary(terminalreporter: Any) -> None:
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {title} | {detail}")
