"""
Experiment config files.

A config is a YAML mapping.  Either name a preset and override keys::

    preset: mfg_stationary_inverse_1d
    seed: 3
    observations:
      v: {count: 20}

or set ``problem: custom`` together with ``solver`` (``mfg_stationary``,
``hjb`` or ``mfg_timedep``); custom configs start from the base preset of
their solver.  Sections and keys:

========== ===============================================================
domain     dims, n (stationary) or nx, nt, T (time-dependent), lower,
           period, n_boundary (mfg_timedep)
equation   nu or sigma, hamiltonian, A, B, R (LQR), coupling_exponent and
           coupling_scale (F = scale * m**exponent),
           V, U_T, m0 (expressions in x, y, z)
kernels    one entry per field (m, u, v, q): {family, lengthscales}
alphas     prior weights m, u, v, lambda and data precisions mo, uo, vo
observ.    per observed field: {count, gamma}
init       initial constants m, u, q, v
controls   max_iter, tol
nugget     eta, mode (blockwise or global)
schwarz    damping, jacobian_point (mixed or current)
reference  refine, tol, relaxation
========== ===============================================================

Numbers are read as 64-bit floats (integers where a count is expected).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..errors import ConfigError
from .expressions import compile_expression
from .presets import PRESETS, SOLVER_BASE, preset

PROBLEMS = tuple(PRESETS) + ("custom",)
SOLVERS = tuple(SOLVER_BASE)
METHODS = ("gppi", "as", "both")
_METHOD_ALIASES = {"gppi": "gppi", "as": "as", "as_newton": "as", "both": "both"}

_KERNEL_FAMILIES = (
    "periodic1d", "periodic_1d", "product_periodic", "periodic", "gaussian_rbf", "gaussian",
    "periodic_times_gaussian_time", "spacetime",
)

# per solver: section -> key -> kind
_EXPR, _FLOAT, _INT, _STR, _KERNEL, _OBS = "expr", "float", "int", "str", "kernel", "obs"

_SCHEMA = {
    "mfg_stationary": {
        "domain": {"dims": _INT, "n": _INT, "lower": _FLOAT, "period": _FLOAT},
        "equation": {"nu": _FLOAT, "hamiltonian": _STR, "coupling_exponent": _FLOAT, "coupling_scale": _FLOAT,
                     "V": _EXPR},
        "kernels": {"m": _KERNEL, "u": _KERNEL, "v": _KERNEL, "q": _KERNEL},
        "alphas": {k: _FLOAT for k in ("m", "mo", "u", "lambda", "v", "vo")},
        "observations": {"m": _OBS, "v": _OBS},
        "init": {"m": _FLOAT, "q": _FLOAT, "v": _FLOAT},
        "reference": {"tol": _FLOAT},
    },
    "hjb": {
        "domain": {"dims": _INT, "nx": _INT, "nt": _INT, "T": _FLOAT, "lower": _FLOAT, "period": _FLOAT},
        "equation": {"sigma": _FLOAT, "hamiltonian": _STR, "A": _FLOAT, "B": _FLOAT, "R": _FLOAT,
                     "V": _EXPR, "U_T": _EXPR},
        "kernels": {"u": _KERNEL, "v": _KERNEL, "q": _KERNEL},
        "alphas": {k: _FLOAT for k in ("u", "uo", "v", "vo")},
        "observations": {"u": _OBS, "v": _OBS},
        "init": {"q": _FLOAT, "v": _FLOAT},
        "reference": {"refine": _INT},
    },
    "mfg_timedep": {
        "domain": {"dims": _INT, "nx": _INT, "nt": _INT, "T": _FLOAT, "lower": _FLOAT, "period": _FLOAT,
                   "n_boundary": _INT},
        "equation": {"nu": _FLOAT, "hamiltonian": _STR, "coupling_exponent": _FLOAT, "coupling_scale": _FLOAT,
                     "V": _EXPR, "m0": _EXPR, "U_T": _EXPR},
        "kernels": {"m": _KERNEL, "u": _KERNEL, "v": _KERNEL, "q": _KERNEL},
        "alphas": {k: _FLOAT for k in ("m", "mo", "u", "v", "vo")},
        "observations": {"m": _OBS, "v": _OBS},
        "init": {"m": _FLOAT, "u": _FLOAT, "q": _FLOAT, "v": _FLOAT},
        "reference": {"refine": _INT, "tol": _FLOAT, "relaxation": _FLOAT},
    },
}
_SHARED = {
    "controls": {"max_iter": _INT, "tol": _FLOAT},
    "nugget": {"eta": _FLOAT, "mode": _STR},
    "schwarz": {"damping": _FLOAT, "jacobian_point": _STR},
}
_TOP = ("preset", "problem", "solver", "seed", "method", "out")


@dataclass
class ExperimentConfig:
    """Validated experiment tree.

    ``params`` holds the sections (domain, equation, ...) with every value
    normalized: floats as ``float``, counts as ``int``, expressions as strings.
    """

    problem: str
    solver: str
    seed: int = 0
    method: str = "both"
    out: Path = Path("results")
    params: dict[str, Any] = field(default_factory=dict)
    source: str | None = None

    @property
    def dims(self) -> int:
        return int(self.params["domain"].get("dims", 1))

    def section(self, name: str) -> dict:
        return self.params.get(name, {})

    def expression(self, key: str):
        """Compiled expression ``equation.<key>``."""
        return compile_expression(self.params["equation"][key], self.dims, f"equation.{key}")

    def to_dict(self) -> dict:
        return {"problem": self.problem, "solver": self.solver, "seed": self.seed, "method": self.method,
                "out": str(self.out), **copy.deepcopy(self.params)}

    def replace(self, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            if v is None:
                continue
            if k == "method":
                v = _method(v, None)
            elif k == "seed":
                v = _seed(v, "seed", None)
            elif k == "out":
                v = Path(v)
            setattr(new, k, v)
        return new


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------


def load_config(path: str | Path | None = None, preset_name: str | None = None) -> ExperimentConfig:
    """Read a YAML config file, or just a preset when ``path`` is ``None``.

    ``preset_name`` overrides the file's ``preset``/``problem`` key.
    """
    if path is None:
        if preset_name is None:
            raise ConfigError("need a config path or a preset name")
        return config_from_dict({"preset": preset_name})
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path), preset_name=preset_name)


def parse_config(text: str, source: str | None = None, preset_name: str | None = None) -> ExperimentConfig:
    """Parse YAML text; errors carry the line number of the offending key."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None) or getattr(exc, "context_mark", None)
        line = mark.line + 1 if mark is not None else None
        msg = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"YAML syntax error: {msg}", None, line) from None
    if data is None:
        data = {}
    lines = _line_map(node) if node is not None else {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level", None, 1)
    if preset_name is not None:
        data = {k: v for k, v in data.items() if k not in ("preset", "problem")}
        data["preset"] = preset_name
    cfg = config_from_dict(data, lines)
    cfg.source = source
    return cfg


def config_from_dict(data: dict, lines: dict[str, int] | None = None) -> ExperimentConfig:
    """Merge ``data`` onto its preset and validate."""
    lines = lines or {}

    def where(path):
        return lines.get(path)

    sections = set(_SHARED).union(*_SCHEMA.values())
    for key in data:
        if key not in _TOP and key not in sections:
            raise ConfigError(f"unknown top-level key {key!r}", key, where(key))

    name = data.get("preset", data.get("problem"))
    if name is None:
        raise ConfigError("config needs 'preset' or 'problem'", "problem", None)
    if "preset" in data and "problem" in data and data["problem"] not in (data["preset"], "custom"):
        raise ConfigError(f"problem {data['problem']!r} contradicts preset {data['preset']!r}",
                          "problem", where("problem"))
    if name not in PROBLEMS:
        key = "preset" if "preset" in data else "problem"
        raise ConfigError(f"unknown problem {name!r}; choose from {', '.join(PROBLEMS)}", key, where(key))

    if name == "custom":
        solver = data.get("solver")
        if solver is None:
            raise ConfigError("problem 'custom' needs a 'solver'", "solver", where("problem"))
        if solver not in SOLVERS:
            raise ConfigError(f"unknown solver {solver!r}; choose from {', '.join(SOLVERS)}",
                              "solver", where("solver"))
        base = preset(SOLVER_BASE[solver])
        base["problem"] = "custom"
    else:
        base = preset(name)
        solver = base["solver"]
        if data.get("solver", solver) != solver:
            raise ConfigError(f"preset {name!r} uses solver {solver!r}", "solver", where("solver"))

    overrides = {k: v for k, v in data.items() if k != "preset"}
    tree = _merge(base, overrides, "", lines)
    schema = {**_SCHEMA[solver], **_SHARED}

    params = {}
    for sec, keys in schema.items():
        raw = tree.get(sec, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"section {sec!r} must be a mapping", sec, where(sec))
        out = {}
        for key, value in raw.items():
            path = f"{sec}.{key}"
            if key not in keys:
                raise ConfigError(f"key {key!r} is not valid for solver {solver!r}", path, where(path))
            out[key] = _coerce(value, keys[key], path, where(path))
        params[sec] = out
    for sec in tree:
        if sec not in schema and sec not in _TOP:
            raise ConfigError(f"section {sec!r} is not valid for solver {solver!r}", sec, where(sec))

    cfg = ExperimentConfig(
        problem=tree["problem"],
        solver=solver,
        seed=_seed(tree.get("seed", 0), "seed", where("seed")),
        method=_method(tree.get("method", "both"), where("method")),
        out=Path(str(tree.get("out", "results"))),
        params=params,
    )
    _check(cfg, lines)
    return cfg


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _line_map(node, prefix: str = "") -> dict[str, int]:
    """Dotted key path -> 1-based line of its key in the YAML source."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for knode, vnode in node.value:
            key = str(knode.value)
            path = f"{prefix}.{key}" if prefix else key
            out[path] = knode.start_mark.line + 1
            out.update(_line_map(vnode, path))
    return out


def _merge(base: dict, over: dict, prefix: str, lines: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        path = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict):
            cur = out.get(k, {})
            if not isinstance(cur, dict):
                raise ConfigError(f"{path!r} is not a section", path, lines.get(path))
            out[k] = _merge(cur, v, path, lines)
        else:
            out[k] = v
    return out


def _number(value, path, line) -> float:
    if isinstance(value, bool) or value is None:
        raise ConfigError(f"expected a number, got {value!r}", path, line)
    if isinstance(value, (int, float)):
        out = float(value)
    elif isinstance(value, str):
        try:
            out = float(value)
        except ValueError:
            raise ConfigError(f"expected a number, got {value!r}", path, line) from None
    else:
        raise ConfigError(f"expected a number, got {type(value).__name__}", path, line)
    if not math.isfinite(out):
        raise ConfigError(f"expected a finite number, got {value!r}", path, line)
    return out


def _integer(value, path, line) -> int:
    x = _number(value, path, line)
    if x != int(x):
        raise ConfigError(f"expected an integer, got {value!r}", path, line)
    return int(x)


def _coerce(value, kind, path, line):
    if kind == _FLOAT:
        return _number(value, path, line)
    if kind == _INT:
        return _integer(value, path, line)
    if kind == _STR:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path, line)
        return value
    if kind == _EXPR:
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise ConfigError(f"expected an expression, got {value!r}", path, line)
        return value if isinstance(value, str) else repr(float(value))
    if kind == _KERNEL:
        if not isinstance(value, dict):
            raise ConfigError("kernel entry must be a mapping {family, lengthscales}", path, line)
        extra = set(value) - {"family", "lengthscales"}
        if extra:
            raise ConfigError(f"unknown kernel key(s) {sorted(extra)}", path, line)
        fam = value.get("family")
        if fam not in _KERNEL_FAMILIES:
            raise ConfigError(f"unknown kernel family {fam!r}", f"{path}.family", line)
        ls = value.get("lengthscales")
        if not isinstance(ls, list):
            ls = [ls]
        vals = [_number(v, f"{path}.lengthscales", line) for v in ls]
        if not vals or any(v <= 0 for v in vals):
            raise ConfigError("lengthscales must be positive", f"{path}.lengthscales", line)
        return {"family": fam, "lengthscales": vals}
    if kind == _OBS:
        if not isinstance(value, dict):
            raise ConfigError("observation entry must be a mapping {count, gamma}", path, line)
        extra = set(value) - {"count", "gamma"}
        if extra:
            raise ConfigError(f"unknown observation key(s) {sorted(extra)}", path, line)
        count = _integer(value.get("count", 0), f"{path}.count", line)
        gamma = _number(value.get("gamma", 0.0), f"{path}.gamma", line)
        if count < 0:
            raise ConfigError("count must be >= 0", f"{path}.count", line)
        if gamma < 0:
            raise ConfigError("gamma must be >= 0", f"{path}.gamma", line)
        return {"count": count, "gamma": gamma}
    raise AssertionError(kind)


def _seed(value, path, line) -> int:
    s = _integer(value, path, line)
    if not 0 <= s < 2 ** 64:
        raise ConfigError("seed must be a 64-bit unsigned integer", path, line)
    return s


def _method(value, line) -> str:
    try:
        return _METHOD_ALIASES[str(value)]
    except KeyError:
        raise ConfigError(f"unknown method {value!r}; choose gppi, as or both", "method", line) from None


def _check(cfg: ExperimentConfig, lines: dict) -> None:
    """Cross-field checks that need the whole tree."""
    p = cfg.params

    def fail(msg, path):
        raise ConfigError(msg, path, lines.get(path))

    dims = cfg.dims
    if dims not in (1, 2):
        fail("dims must be 1 or 2", "domain.dims")
    if cfg.solver != "mfg_stationary" and dims != 1:
        fail(f"solver {cfg.solver!r} supports dims = 1 only", "domain.dims")
    for key in ("n", "nx", "nt", "n_boundary"):
        if key in p["domain"] and p["domain"][key] < 2:
            fail(f"{key} must be >= 2", f"domain.{key}")
    for key in ("period", "T"):
        if key in p["domain"] and p["domain"][key] <= 0:
            fail(f"{key} must be positive", f"domain.{key}")
    for key in ("nu", "sigma"):
        if key in p["equation"] and p["equation"][key] <= 0:
            fail(f"{key} must be positive", f"equation.{key}")
    for key, val in p["alphas"].items():
        if val < 0:
            fail("alphas must be >= 0", f"alphas.{key}")
    for key in ("m", "u", "lambda"):
        if key in p["alphas"] and p["alphas"][key] <= 0:
            fail(f"alphas.{key} must be positive", f"alphas.{key}")
    ham = p["equation"].get("hamiltonian")
    if cfg.solver != "hjb" and ham not in ("quadratic", "quadratic_isotropic"):
        fail("MFG solvers use the quadratic Hamiltonian", "equation.hamiltonian")
    if cfg.solver == "hjb" and ham not in ("quadratic", "quadratic_isotropic", "lqr", "lqr_power", "lqr_power_cost"):
        fail(f"unknown Hamiltonian {ham!r}", "equation.hamiltonian")
    if p["controls"]["max_iter"] < 0:
        fail("max_iter must be >= 0", "controls.max_iter")
    if p["controls"]["tol"] <= 0:
        fail("tol must be positive", "controls.tol")
    if p["nugget"]["mode"] not in ("blockwise", "global"):
        fail("nugget mode must be blockwise or global", "nugget.mode")
    if p["nugget"]["eta"] < 0:
        fail("nugget eta must be >= 0", "nugget.eta")
    if p["schwarz"]["jacobian_point"] not in ("mixed", "current"):
        fail("jacobian_point must be mixed or current", "schwarz.jacobian_point")
    if not 0 < p["schwarz"]["damping"] <= 1:
        fail("damping must lie in (0, 1]", "schwarz.damping")
    rel = p.get("reference", {}).get("relaxation")
    if rel is not None and not 0 < rel <= 1:
        fail("relaxation must lie in (0, 1]", "reference.relaxation")
    for key in p["equation"]:
        if _SCHEMA[cfg.solver]["equation"].get(key) == _EXPR:
            compile_expression(p["equation"][key], dims, f"equation.{key}", lines.get(f"equation.{key}"))
    # observed fields need a data precision
    for obs, alpha in (("m", "mo"), ("u", "uo"), ("v", "vo")):
        spec = p["observations"].get(obs)
        if spec and spec["count"] > 0 and p["alphas"].get(alpha, 0.0) <= 0:
            fail(f"{spec['count']} {obs}-observations need alphas.{alpha} > 0", f"alphas.{alpha}")
    if p["alphas"].get("v", 0.0) > 0 and p["observations"].get("v", {}).get("count", 0) == 0:
        fail("recovering V (alphas.v > 0) needs V-observations", "observations.v")
