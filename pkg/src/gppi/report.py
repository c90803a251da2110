"""Run reports emitted by every solver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any


@dataclass
class IterationRecord:
    iteration: int
    l2_error_m: float = float("nan")
    l2_error_u: float = float("nan")
    residual_norm: float = float("nan")
    seconds: float = 0.0
    change: float = float("nan")


@dataclass
class RunReport:
    """Outcome of one solver run.

    ``history`` is indexed by iteration (0 is the initial guess);
    ``fields`` maps names to node or grid values; ``models`` holds the final
    GP models (not serialized).
    """

    problem: str
    method: str
    converged: bool = False
    iterations: int = 0
    lam: float | None = None
    history: list[IterationRecord] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    fields: dict[str, Any] = field(default_factory=dict)
    models: dict[str, Any] = field(default_factory=dict, repr=False)
    message: str = ""
    extra: dict[str, Any] = field(default_factory=dict)
    state: Any = field(default=None, repr=False)

    @property
    def final_error_m(self) -> float:
        return self.history[-1].l2_error_m if self.history else float("nan")

    @property
    def final_error_u(self) -> float:
        return self.history[-1].l2_error_u if self.history else float("nan")

    def add_time(self, phase: str, seconds: float) -> None:
        self.timings[phase] = self.timings.get(phase, 0.0) + seconds

    def first_iteration_below(self, threshold: float) -> int | None:
        """First iteration whose ``l2_error_m`` is at most ``threshold``."""
        for rec in self.history:
            if math.isfinite(rec.l2_error_m) and rec.l2_error_m <= threshold:
                return rec.iteration
        return None

    def summary(self) -> dict:
        return {
            "problem": self.problem,
            "method": self.method,
            "converged": self.converged,
            "iterations": self.iterations,
            "lambda": self.lam,
            "final_l2_error_m": _finite_or_none(self.final_error_m),
            "final_l2_error_u": _finite_or_none(self.final_error_u),
            "timings": dict(self.timings),
            "message": self.message,
            **{k: v for k, v in self.extra.items() if isinstance(v, (int, float, str, bool, type(None)))},
        }


def _finite_or_none(x: float):
    return x if isinstance(x, (int, float)) and math.isfinite(x) else None
