"""Scalar field expressions written in config files, e.g. ``"1.5*x**2"``.

Expressions see the spatial coordinates ``x``, ``y``, ``z`` (one per axis),
``pi`` and a fixed set of numpy ufuncs; there are no builtins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

_NAMESPACE = {
    "pi": np.pi, "e": np.e,
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log, "sqrt": np.sqrt,
    "abs": np.abs, "tanh": np.tanh, "sinh": np.sinh, "cosh": np.cosh, "arctan": np.arctan,
    "minimum": np.minimum, "maximum": np.maximum, "where": np.where,
}
_AXES = ("x", "y", "z")


@dataclass(frozen=True)
class FieldExpression:
    """Vectorized ``f(points)`` for ``points`` of shape ``(n, dims)``."""

    source: str
    dims: int = 1

    def __post_init__(self):
        try:
            code = compile(self.source, "<expression>", "eval")
        except SyntaxError as exc:
            raise ValueError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        allowed = set(_NAMESPACE) | set(_AXES[: self.dims])
        unknown = sorted(set(code.co_names) - allowed)
        if unknown:
            raise ValueError(f"unknown name(s) {', '.join(unknown)} in expression {self.source!r}")
        object.__setattr__(self, "_code", code)

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] < self.dims:
            raise ValueError(f"expression needs {self.dims} coordinates, got {pts.shape[1]}")
        env = dict(_NAMESPACE)
        env.update({name: pts[:, k] for k, name in enumerate(_AXES[: self.dims])})
        out = eval(self._code, {"__builtins__": {}}, env)
        return np.broadcast_to(np.asarray(out, dtype=float), (pts.shape[0],)).copy()


def compile_expression(value, dims: int, field: str | None = None, line: int | None = None) -> FieldExpression:
    """Build a :class:`FieldExpression` from a config value (string or number)."""
    if isinstance(value, bool):
        raise ConfigError("expected an expression or a number, got a boolean", field, line)
    if isinstance(value, (int, float)):
        value = repr(float(value))
    if not isinstance(value, str):
        raise ConfigError(f"expected an expression string, got {type(value).__name__}", field, line)
    try:
        expr = FieldExpression(value, dims)
        probe = expr(np.zeros((2, dims)) + 0.25)
    except ConfigError:
        raise
    except Exception as exc:  # anything the expression itself raises
        raise ConfigError(str(exc), field, line) from None
    if not np.all(np.isfinite(probe)):
        raise ConfigError(f"expression {value!r} is not finite at a probe point", field, line)
    return expr
