"""Verdicts of the acceptance suite, collected for the terminal summary."""

from __future__ import annotations

CRITERIA = {
    1: "weight recovery on the default grid",
    2: "tabular Bellman convergence",
    3: "LP against simplex grid search",
    4: "scalarisation linearity",
    5: "accuracy ordering",
    6: "neural gradient check",
    7: "trend jump at the regime switch",
    8: "slack grows with noise",
    9: "byte-identical reruns",
}

RESULTS: dict[int, tuple[bool, str]] = {}


def verdict(k: int, ok: bool, detail: str) -> None:
    """Record and print the verdict for criterion k, then fail the test if it did not hold."""
    RESULTS[k] = (bool(ok), detail)
    print(line(k))
    assert ok, line(k)


def line(k: int) -> str:
    if k not in RESULTS:
        return f"FAIL criterion {k} ({CRITERIA[k]}): no verdict, the check raised before finishing"
    ok, detail = RESULTS[k]
    return f"{'PASS' if ok else 'FAIL'} criterion {k} ({CRITERIA[k]}): {detail}"
