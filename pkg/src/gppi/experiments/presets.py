"""Named experiment presets.

Every preset is a complete config tree (see :mod:`gppi.experiments.config`
for the schema).  A user config may name a preset and override any subset of
its keys.  Lengthscales are not part of the original experiment descriptions
and were chosen per problem; everything else is fixed.
"""

from __future__ import annotations

import copy

_PERIODIC = "product_periodic"
_SPACETIME = "periodic_times_gaussian_time"


def _kernels(ell, ell_v, family=_PERIODIC, family_v=_PERIODIC, names=("m", "u", "v", "q")):
    out = {}
    for name in names:
        if name == "v":
            out[name] = {"family": family_v, "lengthscales": list(ell_v)}
        else:
            out[name] = {"family": family, "lengthscales": list(ell)}
    return out


_COMMON = {
    "seed": 0,
    "method": "both",
    "out": "results",
    "controls": {"max_iter": 100, "tol": 1.0e-6},
    "nugget": {"eta": 1.0e-8, "mode": "blockwise"},
    "schwarz": {"damping": 1.0, "jacobian_point": "mixed"},
}

PRESETS: dict[str, dict] = {
    "mfg_stationary_forward": {
        "solver": "mfg_stationary",
        "domain": {"dims": 1, "n": 100, "lower": 0.0, "period": 1.0},
        "equation": {
            "nu": 0.5, "hamiltonian": "quadratic", "coupling_exponent": 4.0,
            "V": "2*(sin(pi*x) + cos(5*pi*x))",
        },
        "kernels": _kernels([0.2], [0.2]),
        "alphas": {"m": 0.5, "mo": 0.0, "u": 0.5, "lambda": 0.5, "v": 0.0, "vo": 0.0},
        "observations": {"m": {"count": 0, "gamma": 0.0}, "v": {"count": 0, "gamma": 0.0}},
        "init": {"m": 1.0, "q": 0.0, "v": 0.0},
        "reference": {"tol": 1.0e-8},
    },
    "mfg_stationary_inverse_1d": {
        "solver": "mfg_stationary",
        "domain": {"dims": 1, "n": 100, "lower": 0.0, "period": 1.0},
        "equation": {
            "nu": 0.3, "hamiltonian": "quadratic", "coupling_exponent": 3.0,
            "V": "0.5*(sin(2*pi*x) + cos(4*pi*x))",
        },
        "kernels": _kernels([0.2], [1.0]),
        "alphas": {"m": 0.5, "mo": 1.0e6, "u": 0.5, "lambda": 0.5, "v": 0.5, "vo": 1.0e6},
        "observations": {"m": {"count": 3, "gamma": 1.0e-3}, "v": {"count": 10, "gamma": 1.0e-3}},
        "init": {"m": 1.0, "q": 0.0, "v": 0.0},
        "reference": {"tol": 1.0e-8},
    },
    "mfg_stationary_inverse_2d": {
        "solver": "mfg_stationary",
        "domain": {"dims": 2, "n": 19, "lower": -0.5, "period": 1.0},
        "equation": {
            "nu": 0.3, "hamiltonian": "quadratic", "coupling_exponent": 2.0,
            "V": "-1.4*(sin(2*pi*x) + cos(4*pi*y) + sin(4*pi*y))",
        },
        "kernels": _kernels([0.5], [1.0]),
        "alphas": {"m": 0.5, "mo": 1.0e6, "u": 0.5, "lambda": 0.5, "v": 0.5, "vo": 1.0e6},
        "observations": {"m": {"count": 40, "gamma": 1.0e-3}, "v": {"count": 90, "gamma": 1.0e-3}},
        "init": {"m": 1.0, "q": 0.0, "v": 0.0},
        "reference": {"tol": 1.0e-8},
    },
    "hjb_inverse": {
        "solver": "hjb",
        "domain": {"dims": 1, "nx": 22, "nt": 22, "T": 1.0, "lower": -0.5, "period": 1.0},
        "equation": {
            "sigma": 0.31622776601683794, "hamiltonian": "lqr_power",
            "A": 0.1, "B": 0.5, "R": 0.2529822128134704,
            "V": "1.5*x**2", "U_T": "0.5 + x**2",
        },
        "kernels": _kernels([2.0, 0.35], [0.6], _SPACETIME, "gaussian_rbf", names=("u", "v", "q")),
        "alphas": {"u": 0.5, "uo": 1.0e6, "v": 0.5, "vo": 1.0e6},
        "observations": {"u": {"count": 30, "gamma": 1.0e-3}, "v": {"count": 3, "gamma": 1.0e-3}},
        "init": {"q": 0.0, "v": 0.0},
        "reference": {"refine": 8},
    },
    "mfg_timedep_inverse": {
        "solver": "mfg_timedep",
        "domain": {"dims": 1, "nx": 22, "nt": 22, "T": 1.0, "lower": -0.5, "period": 1.0, "n_boundary": 20},
        "equation": {
            "nu": 0.3333333333333333, "hamiltonian": "quadratic", "coupling_exponent": 4.0,
            "V": "0.5*(sin(2*pi*x) + 3*cos(2*pi*x))", "m0": "1", "U_T": "0",
        },
        "kernels": _kernels([2.0, 0.35], [2.0], _SPACETIME, _PERIODIC),
        "alphas": {"m": 0.5, "mo": 1.0e6, "u": 0.5, "v": 0.5, "vo": 1.0e6},
        "observations": {"m": {"count": 53, "gamma": 1.0e-3}, "v": {"count": 7, "gamma": 1.0e-3}},
        "init": {"m": 1.0, "u": 1.0, "q": 1.0, "v": 1.0},
        "reference": {"refine": 4, "tol": 1.0e-8, "relaxation": 0.5},
    },
}

for _name, _tree in PRESETS.items():
    PRESETS[_name] = {"problem": _name, **copy.deepcopy(_COMMON), **_tree}

# ``problem: custom`` configs start from the preset of their solver
SOLVER_BASE = {
    "mfg_stationary": "mfg_stationary_forward",
    "hjb": "hjb_inverse",
    "mfg_timedep": "mfg_timedep_inverse",
}

DESCRIPTIONS = {
    "mfg_stationary_forward": "1D stationary MFG, forward, n=100, nu=0.5, F=m^4",
    "mfg_stationary_inverse_1d": "1D stationary MFG, recover V from 3 m- and 10 V-observations",
    "mfg_stationary_inverse_2d": "2D stationary MFG, 19x19 nodes, 40 m- and 90 V-observations",
    "hjb_inverse": "1D LQR-type HJB, recover U and V from 30 U- and 3 V-observations",
    "mfg_timedep_inverse": "1D time-dependent MFG, 53 m- and 7 V-observations",
}


def preset(name: str) -> dict:
    """Deep copy of a named preset tree."""
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None
