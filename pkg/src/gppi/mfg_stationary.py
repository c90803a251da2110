"""
GP policy iteration for the stationary mean field game

    -nu Lap u + Q.grad u + lam = L(Q) + V + F(m),
    -nu Lap m - div(m Q) = 0,
    Q = argmax_q q.grad u - L(q),    sum u = 0,   mean(m) = 1,

forward (``V`` known) or inverse (``V`` and ``m`` partially observed).

Latent layouts, per collocation set ``X`` of ``M`` nodes:

* density block ``m``: ``r1`` values, ``r2_a`` gradient components
  (axis-major), ``r3`` Laplacians, ``r4`` observation reads;
* value block ``u``: ``z1`` values, ``z2_a`` gradients, ``z3`` Laplacians,
  then (inverse mode) ``v1`` values of ``V`` at the nodes and ``v2`` reads of
  ``V`` at its observation points, and finally ``lam``.

The PDE rows eliminate ``r3`` and ``z3``; the mass row eliminates ``r1[-1]``
and the zero-mean row ``z1[-1]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .gp_core import (
    DEFAULT_NUGGET, EqualityRows, FunctionalBlock, LatentGP, LatentObjective, Layout, ObjectiveTerm,
    Observations,
)
from .kernels import IDENTITY, LAPLACIAN, KernelSpec, MatrixKernelSpec, grad
from .policy import HamiltonianSpec, fit_policy_field, improve_jacobian, improve_pointwise, node_operators
from .problem import (
    PolicyIterationProblem, RunControls, Sensitivity, State, run_gppi,
)
from .reference import Grid, GridField, l2_error
from .report import RunReport

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PowerCoupling:
    """``F(m) = scale * m**a``; ``scale = 0`` switches the coupling off."""

    exponent: float = 1.0
    scale: float = 1.0

    def __call__(self, m):
        return self.scale * np.power(m, self.exponent)

    def derivative(self, m):
        a = self.exponent
        if a == 0 or self.scale == 0:
            return np.zeros_like(np.asarray(m, dtype=float))
        return self.scale * a * np.power(m, a - 1.0)


@dataclass
class ReferenceFields:
    """Reference density/value fields on a grid used for per-iteration errors."""

    grid: Grid
    m: GridField | None = None
    u: GridField | None = None
    lam: float | None = None


@dataclass
class StationaryConfig:
    """Stationary MFG instance.

    ``n`` nodes per axis on ``[lower, lower + 1)^dims``.  ``V`` maps ``(n, d)``
    points to values; in forward mode (``alpha_v == 0``) it is the known
    cost, in inverse mode it is only used by callers to synthesize data.
    """

    dims: int = 1
    n: int = 100
    lower: float = 0.0
    nu: float = 0.5
    ham: HamiltonianSpec = None
    F: PowerCoupling = field(default_factory=lambda: PowerCoupling(4.0))
    V: Callable[[np.ndarray], np.ndarray] | None = None
    kernel_m: KernelSpec = None
    kernel_u: KernelSpec = None
    kernel_v: KernelSpec = None
    kernel_q: KernelSpec = None
    alpha_m: float = 0.5
    alpha_mo: float = 0.0
    alpha_u: float = 0.5
    alpha_lambda: float = 0.5
    alpha_v: float = 0.0
    alpha_vo: float = 0.0
    obs_m: Observations | None = None
    obs_v: Observations | None = None
    m_init: float = 1.0
    q_init: float = 0.0
    v_init: float = 0.0
    mass: float = 1.0
    nugget: float = DEFAULT_NUGGET
    nugget_mode: str = "blockwise"
    controls: RunControls = field(default_factory=RunControls)
    reference: ReferenceFields | None = None

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity nu must be positive")
        if self.n ** self.dims < 2:
            raise ValueError("need at least two collocation nodes")
        if self.ham is None:
            self.ham = HamiltonianSpec(dims=self.dims)
        default = KernelSpec("product_periodic", (0.2,), dims=self.dims)
        for name in ("kernel_m", "kernel_u", "kernel_v", "kernel_q"):
            if getattr(self, name) is None:
                setattr(self, name, default)
        for name in ("alpha_m", "alpha_mo", "alpha_u", "alpha_lambda", "alpha_v", "alpha_vo"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.alpha_m <= 0 or self.alpha_u <= 0:
            raise ValueError("alpha_m and alpha_u must be positive")
        if self.alpha_lambda <= 0:
            raise ValueError("alpha_lambda must be positive (lambda is always solved)")
        if self.alpha_v == 0 and self.V is None:
            raise ValueError("forward mode (alpha_v = 0) needs the cost V")

    @property
    def inverse(self) -> bool:
        return self.alpha_v > 0

    def grid(self) -> Grid:
        return Grid.periodic_box(self.n, self.dims, self.lower)


class StationaryMFG(PolicyIterationProblem):
    name = "mfg_stationary"
    blocks = ("m", "u")
    change_block = "m"

    def __init__(self, cfg: StationaryConfig):
        self.cfg = cfg
        d = cfg.dims
        self.d = d
        self.grid = cfg.grid()
        X = self.grid.points
        self.X = X
        M = X.shape[0]
        self.M = M

        # policy field operators at the nodes
        self.kq = MatrixKernelSpec(cfg.kernel_q, d)
        # the representer mean reproduces node values, so Q = q there; only the divergence needs the fit
        _, self.D = node_operators(self.kq, X, eta=cfg.nugget)
        self.E = np.eye(M)

        # ---- density block
        obs_m = cfg.obs_m if (cfg.obs_m is not None and cfg.alpha_mo > 0 and cfg.obs_m.size) else None
        self.obs_m = obs_m
        segs = [("r1", M)] + [(f"r2_{a}", M) for a in range(d)] + [("r3", M)]
        if obs_m is not None:
            segs.append(("r4", obs_m.size))
        lay = Layout(segs)
        self.lay_m = lay
        fblocks = [("r1", FunctionalBlock(IDENTITY, X))]
        fblocks += [(f"r2_{a}", FunctionalBlock(grad(a), X)) for a in range(d)]
        fblocks += [("r3", FunctionalBlock(LAPLACIAN, X))]
        if obs_m is not None:
            fblocks.append(("r4", FunctionalBlock(IDENTITY, obs_m.points)))
        self.gp_m = LatentGP(cfg.kernel_m, lay, fblocks, cfg.alpha_m, cfg.nugget, cfg.nugget_mode)
        terms = [self.gp_m.prior_term("m_prior")]
        if obs_m is not None:
            terms.append(ObjectiveTerm("m_obs", lay.index("r4"), np.eye(obs_m.size) / cfg.alpha_mo, obs_m.values))
        obj_m = LatentObjective(lay.n, terms)

        r1 = lay.index("r1")
        mass_row = EqualityRows(lay.n, [r1[-1]],
                                sp.csr_matrix((-np.ones(M - 1), (np.zeros(M - 1, int), r1[:-1])), shape=(1, lay.n)),
                                [M * cfg.mass])
        self.static_m = EqualityRows.concat(lay.n, [mass_row, self.gp_m.tie_rows()])

        # ---- value block
        obs_v = cfg.obs_v if (cfg.inverse and cfg.obs_v is not None and cfg.obs_v.size) else None
        self.obs_v = obs_v
        segs = [("z1", M)] + [(f"z2_{a}", M) for a in range(d)] + [("z3", M)]
        if cfg.inverse:
            segs.append(("v1", M))
            if obs_v is not None:
                segs.append(("v2", obs_v.size))
        segs.append(("lam", 1))
        lay = Layout(segs)
        self.lay_u = lay
        fblocks = [("z1", FunctionalBlock(IDENTITY, X))]
        fblocks += [(f"z2_{a}", FunctionalBlock(grad(a), X)) for a in range(d)]
        fblocks += [("z3", FunctionalBlock(LAPLACIAN, X))]
        self.gp_u = LatentGP(cfg.kernel_u, lay, fblocks, cfg.alpha_u, cfg.nugget, cfg.nugget_mode)
        terms = [self.gp_u.prior_term("u_prior")]
        tie = [self.gp_u.tie_rows()]
        if cfg.inverse:
            vb = [("v1", FunctionalBlock(IDENTITY, X))]
            if obs_v is not None:
                vb.append(("v2", FunctionalBlock(IDENTITY, obs_v.points)))
            self.gp_v = LatentGP(cfg.kernel_v, lay, vb, cfg.alpha_v, cfg.nugget, cfg.nugget_mode)
            terms.append(self.gp_v.prior_term("v_prior"))
            tie.append(self.gp_v.tie_rows())
            if obs_v is not None and cfg.alpha_vo > 0:
                terms.append(ObjectiveTerm("v_obs", lay.index("v2"), np.eye(obs_v.size) / cfg.alpha_vo, obs_v.values))
            self.V_nodes = None
        else:
            self.gp_v = None
            self.V_nodes = np.asarray(cfg.V(X), dtype=float)
        terms.append(ObjectiveTerm("lam", lay.index("lam"), np.array([[1.0 / cfg.alpha_lambda]])))
        obj_u = LatentObjective(lay.n, [t for t in terms if t is not None])

        z1 = lay.index("z1")
        mean_row = EqualityRows(lay.n, [z1[-1]],
                                sp.csr_matrix((-np.ones(M - 1), (np.zeros(M - 1, int), z1[:-1])), shape=(1, lay.n)),
                                [0.0])
        self.static_u = EqualityRows.concat(lay.n, [mean_row, *tie])
        self.objectives = {"m": obj_m, "u": obj_u}

    # ------------------------------------------------------------------
    # node policy quantities
    # ------------------------------------------------------------------

    def _policy_nodes(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Q = np.array(q, dtype=float)
        div = sum(self.D[a] @ q[:, a] for a in range(self.d))
        return Q, div

    def m_nodes(self, x_m: np.ndarray) -> np.ndarray:
        return x_m[self.lay_m.index("r1")]

    # ------------------------------------------------------------------
    # rows
    # ------------------------------------------------------------------

    def _fp_rows(self, q: np.ndarray) -> EqualityRows:
        lay, M, nu = self.lay_m, self.M, self.cfg.nu
        Q, div = self._policy_nodes(q)
        r1, r3 = lay.index("r1"), lay.index("r3")
        rows = np.arange(M)
        ri = [rows, ] * (self.d + 1)
        ci = [r1] + [lay.index(f"r2_{a}") for a in range(self.d)]
        vals = [-div / nu] + [-Q[:, a] / nu for a in range(self.d)]
        C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=(M, lay.n))
        return EqualityRows(lay.n, r3, C, np.zeros(M))

    def _hjb_rows(self, q: np.ndarray, m: np.ndarray, x_v: np.ndarray | None = None) -> EqualityRows:
        lay, M, nu, cfg = self.lay_u, self.M, self.cfg.nu, self.cfg
        Q, _ = self._policy_nodes(q)
        z3 = lay.index("z3")
        rows = np.arange(M)
        ri = [rows] * self.d + [rows]
        ci = [lay.index(f"z2_{a}") for a in range(self.d)] + [np.full(M, lay.index("lam")[0])]
        vals = [Q[:, a] / nu for a in range(self.d)] + [np.full(M, 1.0 / nu)]
        const = -(cfg.ham.running_cost(Q) + cfg.F(m)) / nu
        if cfg.inverse:
            ri.append(rows)
            ci.append(lay.index("v1"))
            vals.append(np.full(M, -1.0 / nu))
        else:
            const = const - self.V_nodes / nu
        C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=(M, lay.n))
        return EqualityRows(lay.n, z3, C, const)

    def rows(self, block: str, state: State) -> EqualityRows:
        if block == "m":
            return EqualityRows.concat(self.lay_m.n, [self.static_m, self._fp_rows(state.q)])
        return EqualityRows.concat(self.lay_u.n, [self.static_u, self._hjb_rows(state.q, self.m_nodes(state.x["m"]))])

    # ------------------------------------------------------------------
    # policy
    # ------------------------------------------------------------------

    def grad_index(self) -> np.ndarray:
        return np.concatenate([self.lay_u.index(f"z2_{a}") for a in range(self.d)])

    def gradients(self, x_u: np.ndarray) -> np.ndarray:
        return np.stack([x_u[self.lay_u.index(f"z2_{a}")] for a in range(self.d)], axis=1)

    def improve(self, state: State) -> np.ndarray:
        return improve_pointwise(self.gradients(state.x["u"]), self.cfg.ham)

    def policy_jacobian(self, state: State) -> np.ndarray:
        p = self.gradients(state.x["u"])
        J = improve_jacobian(p, self.cfg.ham)  # (M, d, d)
        out = np.zeros((self.M * self.d, self.lay_u.n))
        gi = [self.lay_u.index(f"z2_{b}") for b in range(self.d)]
        rows = np.arange(self.M)
        for a in range(self.d):
            for b in range(self.d):
                out[a * self.M + rows, gi[b]] = J[:, a, b]
        return out

    # ------------------------------------------------------------------
    # sensitivities (Schwarz Newton)
    # ------------------------------------------------------------------

    def sensitivities(self, block: str, state: State) -> dict[str, Sensitivity]:
        M, d, nu = self.M, self.d, self.cfg.nu
        E, D = self.E, self.D
        if block == "m":
            lay = self.lay_m
            n_static = self.static_m.targets.size
            r1 = lay.index("r1")
            r2 = [lay.index(f"r2_{a}") for a in range(d)]

            def CTg(gt):
                g = gt[n_static:]
                out = np.zeros((lay.n, d * M))
                for a in range(d):
                    cols = slice(a * M, (a + 1) * M)
                    out[r2[a], cols] += -(g[:, None] * E) / nu
                    out[r1, cols] += -(g[:, None] * D[a]) / nu
                return out

            def Cx(x):
                out = np.zeros((n_static + M, d * M))
                for a in range(d):
                    out[n_static:, a * M : (a + 1) * M] = -(x[r2[a]][:, None] * E + x[r1][:, None] * D[a]) / nu
                return out

            return {"q": Sensitivity(CTg, Cx)}

        lay = self.lay_u
        n_static = self.static_u.targets.size
        z2 = [lay.index(f"z2_{a}") for a in range(d)]
        Q, _ = self._policy_nodes(state.q)
        Lg = self.cfg.ham.running_cost_grad(Q)
        m = self.m_nodes(state.x["m"])
        Fp = self.cfg.F.derivative(m)
        r1 = self.lay_m.index("r1")

        def CTg_q(gt):
            g = gt[n_static:]
            out = np.zeros((lay.n, d * M))
            for a in range(d):
                out[z2[a], a * M : (a + 1) * M] += (g[:, None] * E) / nu
            return out

        def Cx_q(x):
            out = np.zeros((n_static + M, d * M))
            for a in range(d):
                out[n_static:, a * M : (a + 1) * M] = ((x[z2[a]] - Lg[:, a])[:, None] * E) / nu
            return out

        def CTg_m(gt):
            return np.zeros((lay.n, self.lay_m.n))

        def Cx_m(x):
            out = np.zeros((n_static + M, self.lay_m.n))
            out[n_static + np.arange(M), r1] = -Fp / nu
            return out

        return {"q": Sensitivity(CTg_q, Cx_q), "m": Sensitivity(CTg_m, Cx_m)}

    # ------------------------------------------------------------------
    # bookkeeping
    # ------------------------------------------------------------------

    def initial_state(self) -> State:
        cfg = self.cfg
        xm = np.zeros(self.lay_m.n)
        xm[self.lay_m["r1"]] = cfg.m_init
        if "r4" in self.lay_m:
            xm[self.lay_m["r4"]] = cfg.m_init
        xu = np.zeros(self.lay_u.n)
        if cfg.inverse:
            xu[self.lay_u["v1"]] = cfg.v_init
            if "v2" in self.lay_u:
                xu[self.lay_u["v2"]] = cfg.v_init
        q = np.full((self.M, self.d), float(cfg.q_init))
        return State({"m": xm, "u": xu}, q)

    def node_volume(self) -> float:
        return 1.0 / self.M

    def change_index(self) -> np.ndarray:
        return self.lay_m.index("r1")

    def lam(self, state: State) -> float:
        return float(state.x["u"][self.lay_u["lam"]][0])

    def errors(self, state: State) -> tuple[float, float]:
        ref = self.cfg.reference
        if ref is None:
            return float("nan"), float("nan")
        P = ref.grid.points
        em = eu = float("nan")
        if ref.m is not None:
            em = l2_error(GridField(ref.grid, self.gp_m.model(state.x["m"])(P)), ref.m)
        if ref.u is not None:
            eu = l2_error(GridField(ref.grid, self.gp_u.model(state.x["u"])(P)), ref.u)
        return em, eu

    def models(self, state: State) -> dict:
        out = {"m": self.gp_m.model(state.x["m"]), "u": self.gp_u.model(state.x["u"]),
               "Q": fit_policy_field(self.X, state.q, self.kq, self.cfg.nugget)}
        if self.gp_v is not None:
            out["V"] = self.gp_v.model(state.x["u"])
        return out

    def finalize(self, report: RunReport, state: State) -> None:
        models = self.models(state)
        report.models = models
        P = self.grid.points
        report.fields = {k: GridField(self.grid, models[k](P)) for k in ("m", "u", "V") if k in models}
        m = self.m_nodes(state.x["m"])
        report.extra["mean_m"] = float(m.mean())
        report.extra["min_m"] = float(m.min())
        if m.min() < 0:
            log.warning("recovered density has negative values (min %.3e); not corrected", m.min())


def solve_fp_stationary(cfg: StationaryConfig | StationaryMFG, policy) -> tuple[np.ndarray, object]:
    """FP block under a policy field; returns the latent vector and the density model."""
    prob = cfg if isinstance(cfg, StationaryMFG) else StationaryMFG(cfg)
    q = _node_policy(prob, policy)
    st = prob.initial_state()
    st.q = q
    sol = prob.solve_block("m", st)
    return sol.x, prob.gp_m.model(sol.x)


def solve_hjb_stationary(cfg: StationaryConfig | StationaryMFG, policy, m_model) -> tuple:
    """HJB block under a policy and density; returns ``(z, lam, v, models)``."""
    prob = cfg if isinstance(cfg, StationaryMFG) else StationaryMFG(cfg)
    st = prob.initial_state()
    st.q = _node_policy(prob, policy)
    m = m_model(prob.X) if callable(m_model) else np.asarray(m_model, dtype=float)
    st.x["m"][prob.lay_m["r1"]] = m
    sol = prob.solve_block("u", st)
    lay = prob.lay_u
    v = None
    models = {"u": prob.gp_u.model(sol.x)}
    if prob.gp_v is not None:
        v = sol.x[prob.gp_v.index]
        models["V"] = prob.gp_v.model(sol.x)
    z = sol.x[: lay["z3"].stop]
    return z, float(sol.x[lay["lam"]][0]), v, models


def _node_policy(prob: StationaryMFG, policy) -> np.ndarray:
    if policy is None:
        return np.zeros((prob.M, prob.d))
    if hasattr(policy, "qvals"):
        from .policy import eval_policy

        return np.atleast_2d(eval_policy(policy, prob.X)).reshape(prob.M, prob.d)
    q = np.asarray(policy, dtype=float)
    return q.reshape(prob.M, prob.d) if q.size == prob.M * prob.d else np.broadcast_to(q, (prob.M, prob.d)).copy()


def gppi_stationary(cfg: StationaryConfig) -> RunReport:
    prob = StationaryMFG(cfg)
    return run_gppi(prob, cfg.controls)
