"""
GP policy iteration for the time-dependent mean field game on ``T^d x [0, T]``

    -u_t - nu Lap u + Q.grad u = L(Q) + V + F(m),      u(., T) = U_T,
     m_t - nu Lap m - div(m Q) = 0,                     m(., 0) = m0,
     Q = argmax_q q.grad u - L(q).

Both blocks share the interior collocation nodes (``0 < t < T``).  The density
block adds the initial slice, the value block the terminal slice.  Layouts:

* density block ``m``: ``r1`` values (interior, then initial slice), ``r2``
  time derivatives, ``r3_a`` gradients, ``r4`` Laplacians (interior) and
  ``r5`` observation reads;
* value block ``u``: ``z1`` values (interior, then terminal slice), ``z2``,
  ``z3_a``, ``z4`` as above, then (inverse mode) ``v1`` values of the spatial
  cost at the interior nodes' spatial coordinates and ``v2`` observation reads.

The PDE rows eliminate ``r2`` and ``z2``; the slice rows pin ``r1`` and ``z1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .gp_core import (
    DEFAULT_NUGGET, EqualityRows, FunctionalBlock, LatentGP, LatentObjective, Layout, ObjectiveTerm, Observations,
)
from .kernels import DT, IDENTITY, LAPLACIAN, KernelSpec, MatrixKernelSpec, grad
from .mfg_stationary import PowerCoupling
from .policy import HamiltonianSpec, fit_policy_field, improve_jacobian, improve_pointwise, node_operators
from .problem import PolicyIterationProblem, RunControls, Sensitivity, State, run_gppi
from .reference import Grid, GridField, classical_pi_timedep, l2_error, sample_onto
from .report import RunReport

log = logging.getLogger(__name__)


@dataclass
class TimeDepReference:
    """Reference ``m`` and ``u`` on a space-time grid (time levels ``0..T``)."""

    grid: Grid
    m: GridField | None = None
    u: GridField | None = None


@dataclass
class TimeDepConfig:
    """Time-dependent MFG instance.

    Interior nodes are the ``nx``-point spatial grid times the levels
    ``T/nt, ..., T (nt - 1)/nt``.  The initial and terminal slices carry
    ``n_boundary`` uniform spatial points each.  ``V``, ``m0`` and ``U_T``
    take ``(n, dims)`` spatial points.
    """

    dims: int = 1
    lower: float = -0.5
    period: float = 1.0
    T: float = 1.0
    nx: int = 22
    nt: int = 22
    n_boundary: int = 20
    nu: float = 1.0 / 3.0
    ham: HamiltonianSpec = None
    F: PowerCoupling = field(default_factory=lambda: PowerCoupling(4.0))
    V: Callable[[np.ndarray], np.ndarray] | None = None
    m0: Callable[[np.ndarray], np.ndarray] | None = None
    U_T: Callable[[np.ndarray], np.ndarray] | None = None
    kernel_m: KernelSpec = None
    kernel_u: KernelSpec = None
    kernel_v: KernelSpec = None
    kernel_q: KernelSpec = None
    alpha_m: float = 0.5
    alpha_mo: float = 0.0
    alpha_u: float = 0.5
    alpha_v: float = 0.0
    alpha_vo: float = 0.0
    obs_m: Observations | None = None
    obs_v: Observations | None = None
    m_init: float = 1.0
    u_init: float = 0.0
    q_init: float = 0.0
    v_init: float = 0.0
    nugget: float = DEFAULT_NUGGET
    nugget_mode: str = "blockwise"
    controls: RunControls = field(default_factory=RunControls)
    reference: TimeDepReference | None = None

    def __post_init__(self):
        if self.T <= 0 or self.nu <= 0:
            raise ValueError("T and nu must be positive")
        if self.nt < 2 or self.nx < 1 or self.n_boundary < 1:
            raise ValueError("need nt >= 2, nx >= 1 and n_boundary >= 1")
        if self.ham is None:
            self.ham = HamiltonianSpec(dims=self.dims)
        st = KernelSpec("periodic_times_gaussian_time", (0.5, 0.5), dims=self.dims, has_time=True)
        for name in ("kernel_m", "kernel_u", "kernel_q"):
            if getattr(self, name) is None:
                setattr(self, name, st)
            elif not getattr(self, name).has_time:
                raise ValueError(f"{name} must be a space-time kernel")
        if self.kernel_v is None:
            self.kernel_v = KernelSpec("product_periodic", (0.5,), dims=self.dims)
        if self.kernel_v.has_time:
            raise ValueError("kernel_v is a spatial kernel")
        for name in ("alpha_m", "alpha_mo", "alpha_u", "alpha_v", "alpha_vo"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.alpha_m <= 0 or self.alpha_u <= 0:
            raise ValueError("alpha_m and alpha_u must be positive")
        if self.alpha_v == 0 and self.V is None:
            raise ValueError("forward mode (alpha_v = 0) needs the cost V")
        if self.m0 is None:
            self.m0 = lambda x: np.ones(len(x))
        if self.U_T is None:
            self.U_T = lambda x: np.zeros(len(x))

    @property
    def inverse(self) -> bool:
        return self.alpha_v > 0

    def spatial_nodes(self, n: int) -> np.ndarray:
        axes = [self.lower + self.period * np.arange(n) / n] * self.dims
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def nodes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Interior, initial-slice and terminal-slice space-time nodes."""
        xs = self.spatial_nodes(self.nx)
        ts = self.T * np.arange(1, self.nt) / self.nt
        inner = np.vstack([np.column_stack([xs, np.full(len(xs), t)]) for t in ts])
        xb = self.spatial_nodes(self.n_boundary)
        first = np.column_stack([xb, np.zeros(len(xb))])
        last = np.column_stack([xb, np.full(len(xb), self.T)])
        return inner, first, last

    def grid(self) -> Grid:
        """Output grid: ``nx`` spatial nodes times the levels ``0, T/nt, ..., T`` (1D)."""
        if self.dims != 1:
            raise ValueError("grid output is available for dims = 1")
        return Grid.space_time(self.nx, np.linspace(0.0, self.T, self.nt + 1), self.lower, self.period)


class TimeDepMFG(PolicyIterationProblem):
    name = "mfg_timedep"
    blocks = ("m", "u")
    change_block = "m"

    def __init__(self, cfg: TimeDepConfig):
        self.cfg = cfg
        d = cfg.dims
        self.d = d
        Xi, X0, XT = cfg.nodes()
        self.Xi, self.X0, self.XT = Xi, X0, XT
        Mi = Xi.shape[0]
        self.Mi = Mi

        self.kq = MatrixKernelSpec(cfg.kernel_q, d)
        # the representer mean reproduces node values, so Q = q there; only the divergence needs the fit
        _, self.D = node_operators(self.kq, Xi, eta=cfg.nugget)

        # ---- density block
        obs_m = cfg.obs_m if (cfg.obs_m is not None and cfg.alpha_mo > 0 and cfg.obs_m.size) else None
        self.obs_m = obs_m
        Xm = np.vstack([Xi, X0])
        segs = [("r1", Xm.shape[0]), ("r2", Mi)] + [(f"r3_{a}", Mi) for a in range(d)] + [("r4", Mi)]
        if obs_m is not None:
            segs.append(("r5", obs_m.size))
        lay = Layout(segs)
        self.lay_m = lay
        fb = [("r1", FunctionalBlock(IDENTITY, Xm)), ("r2", FunctionalBlock(DT, Xi))]
        fb += [(f"r3_{a}", FunctionalBlock(grad(a), Xi)) for a in range(d)]
        fb += [("r4", FunctionalBlock(LAPLACIAN, Xi))]
        if obs_m is not None:
            fb.append(("r5", FunctionalBlock(IDENTITY, obs_m.points)))
        self.gp_m = LatentGP(cfg.kernel_m, lay, fb, cfg.alpha_m, cfg.nugget, cfg.nugget_mode)
        terms = [self.gp_m.prior_term("m_prior")]
        if obs_m is not None:
            terms.append(ObjectiveTerm("m_obs", lay.index("r5"), np.eye(obs_m.size) / cfg.alpha_mo, obs_m.values))
        obj_m = LatentObjective(lay.n, terms)
        r1 = lay.index("r1")
        n0 = X0.shape[0]
        initial = EqualityRows(lay.n, r1[Mi:], sp.csr_matrix((n0, lay.n)), np.asarray(cfg.m0(X0[:, :d]), float))
        self.static_m = EqualityRows.concat(lay.n, [initial, self.gp_m.tie_rows()])

        # ---- value block
        obs_v = cfg.obs_v if (cfg.inverse and cfg.obs_v is not None and cfg.obs_v.size) else None
        self.obs_v = obs_v
        Xu = np.vstack([Xi, XT])
        segs = [("z1", Xu.shape[0]), ("z2", Mi)] + [(f"z3_{a}", Mi) for a in range(d)] + [("z4", Mi)]
        if cfg.inverse:
            segs.append(("v1", Mi))
            if obs_v is not None:
                segs.append(("v2", obs_v.size))
        lay = Layout(segs)
        self.lay_u = lay
        fb = [("z1", FunctionalBlock(IDENTITY, Xu)), ("z2", FunctionalBlock(DT, Xi))]
        fb += [(f"z3_{a}", FunctionalBlock(grad(a), Xi)) for a in range(d)]
        fb += [("z4", FunctionalBlock(LAPLACIAN, Xi))]
        self.gp_u = LatentGP(cfg.kernel_u, lay, fb, cfg.alpha_u, cfg.nugget, cfg.nugget_mode)
        terms = [self.gp_u.prior_term("u_prior")]
        tie = [self.gp_u.tie_rows()]
        if cfg.inverse:
            vb = [("v1", FunctionalBlock(IDENTITY, Xi[:, :d]))]
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
            self.V_nodes = np.asarray(cfg.V(Xi[:, :d]), dtype=float)
        obj_u = LatentObjective(lay.n, [t for t in terms if t is not None])
        z1 = lay.index("z1")
        nT = XT.shape[0]
        terminal = EqualityRows(lay.n, z1[Mi:], sp.csr_matrix((nT, lay.n)), np.asarray(cfg.U_T(XT[:, :d]), float))
        self.static_u = EqualityRows.concat(lay.n, [terminal, *tie])
        self.objectives = {"m": obj_m, "u": obj_u}

    # ------------------------------------------------------------------

    def _policy_nodes(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Q = np.array(q, dtype=float)
        div = sum(self.D[a] @ q[:, a] for a in range(self.d))
        return Q, div

    def m_nodes(self, x_m: np.ndarray) -> np.ndarray:
        """Density at the interior nodes (read from the latent values)."""
        return x_m[self.lay_m.index("r1")[: self.Mi]]

    def _fp_rows(self, q: np.ndarray) -> EqualityRows:
        lay, Mi, nu, d = self.lay_m, self.Mi, self.cfg.nu, self.d
        Q, div = self._policy_nodes(q)
        rows = np.arange(Mi)
        ri = [rows] * (d + 2)
        ci = [lay.index("r4"), lay.index("r1")[:Mi]] + [lay.index(f"r3_{a}") for a in range(d)]
        vals = [np.full(Mi, nu), div] + [Q[:, a] for a in range(d)]
        C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=(Mi, lay.n))
        return EqualityRows(lay.n, lay.index("r2"), C, np.zeros(Mi))

    def _hjb_rows(self, q: np.ndarray, m: np.ndarray) -> EqualityRows:
        lay, Mi, nu, d, cfg = self.lay_u, self.Mi, self.cfg.nu, self.d, self.cfg
        Q, _ = self._policy_nodes(q)
        rows = np.arange(Mi)
        ri = [rows] * (d + 1)
        ci = [lay.index("z4")] + [lay.index(f"z3_{a}") for a in range(d)]
        vals = [np.full(Mi, -nu)] + [Q[:, a] for a in range(d)]
        const = -(cfg.ham.running_cost(Q) + cfg.F(m))
        if cfg.inverse:
            ri.append(rows)
            ci.append(lay.index("v1"))
            vals.append(-np.ones(Mi))
        else:
            const = const - self.V_nodes
        C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=(Mi, lay.n))
        return EqualityRows(lay.n, lay.index("z2"), C, const)

    def rows(self, block: str, state: State) -> EqualityRows:
        if block == "m":
            return EqualityRows.concat(self.lay_m.n, [self.static_m, self._fp_rows(state.q)])
        return EqualityRows.concat(self.lay_u.n, [self.static_u, self._hjb_rows(state.q, self.m_nodes(state.x["m"]))])

    def gradients(self, x_u: np.ndarray) -> np.ndarray:
        return np.stack([x_u[self.lay_u.index(f"z3_{a}")] for a in range(self.d)], axis=1)

    def improve(self, state: State) -> np.ndarray:
        return improve_pointwise(self.gradients(state.x["u"]), self.cfg.ham)

    def policy_jacobian(self, state: State) -> np.ndarray:
        J = improve_jacobian(self.gradients(state.x["u"]), self.cfg.ham)
        Mi, d = self.Mi, self.d
        out = np.zeros((Mi * d, self.lay_u.n))
        rows = np.arange(Mi)
        for a in range(d):
            for b in range(d):
                out[a * Mi + rows, self.lay_u.index(f"z3_{b}")] = J[:, a, b]
        return out

    def sensitivities(self, block: str, state: State) -> dict[str, Sensitivity]:
        Mi, d, D = self.Mi, self.d, self.D
        if block == "m":
            lay = self.lay_m
            n_static = self.static_m.targets.size
            r1 = lay.index("r1")[:Mi]
            r3 = [lay.index(f"r3_{a}") for a in range(d)]

            def CTg(gt):
                g = gt[n_static:]
                out = np.zeros((lay.n, d * Mi))
                for a in range(d):
                    cols = slice(a * Mi, (a + 1) * Mi)
                    out[r3[a], cols] += np.diag(g)
                    out[r1, cols] += g[:, None] * D[a]
                return out

            def Cx(x):
                out = np.zeros((n_static + Mi, d * Mi))
                for a in range(d):
                    out[n_static:, a * Mi : (a + 1) * Mi] = np.diag(x[r3[a]]) + x[r1][:, None] * D[a]
                return out

            return {"q": Sensitivity(CTg, Cx)}

        lay = self.lay_u
        n_static = self.static_u.targets.size
        z3 = [lay.index(f"z3_{a}") for a in range(d)]
        Q, _ = self._policy_nodes(state.q)
        Lg = self.cfg.ham.running_cost_grad(Q)
        Fp = self.cfg.F.derivative(self.m_nodes(state.x["m"]))
        r1 = self.lay_m.index("r1")[:Mi]

        def CTg_q(gt):
            g = gt[n_static:]
            out = np.zeros((lay.n, d * Mi))
            for a in range(d):
                out[z3[a], a * Mi : (a + 1) * Mi] += np.diag(g)
            return out

        def Cx_q(x):
            out = np.zeros((n_static + Mi, d * Mi))
            for a in range(d):
                out[n_static:, a * Mi : (a + 1) * Mi] = np.diag(x[z3[a]] - Lg[:, a])
            return out

        def CTg_m(gt):
            return np.zeros((lay.n, self.lay_m.n))

        def Cx_m(x):
            out = np.zeros((n_static + Mi, self.lay_m.n))
            out[n_static + np.arange(Mi), r1] = -Fp
            return out

        return {"q": Sensitivity(CTg_q, Cx_q), "m": Sensitivity(CTg_m, Cx_m)}

    # ------------------------------------------------------------------

    def initial_state(self) -> State:
        cfg = self.cfg
        xm = np.zeros(self.lay_m.n)
        xm[self.lay_m["r1"]] = cfg.m_init
        if "r5" in self.lay_m:
            xm[self.lay_m["r5"]] = cfg.m_init
        xu = np.zeros(self.lay_u.n)
        xu[self.lay_u["z1"]] = cfg.u_init
        if cfg.inverse:
            xu[self.lay_u["v1"]] = cfg.v_init
            if "v2" in self.lay_u:
                xu[self.lay_u["v2"]] = cfg.v_init
        return State({"m": xm, "u": xu}, np.full((self.Mi, self.d), float(cfg.q_init)))

    def node_volume(self) -> float:
        return self.cfg.T * self.cfg.period**self.d / self.Mi

    def change_index(self) -> np.ndarray:
        return self.lay_m.index("r1")[: self.Mi]

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
               "Q": fit_policy_field(self.Xi, state.q, self.kq, self.cfg.nugget)}
        if self.gp_v is not None:
            out["V"] = self.gp_v.model(state.x["u"])
        return out

    def finalize(self, report: RunReport, state: State) -> None:
        models = self.models(state)
        report.models = models
        if self.d == 1:
            g = self.cfg.grid()
            report.fields = {k: GridField(g, models[k](g.points)) for k in ("m", "u")}
            xs = Grid.periodic_box(self.cfg.nx, 1, self.cfg.lower, self.cfg.period)
            V = models["V"](xs.points) if "V" in models else self.cfg.V(xs.points)
            report.fields["V"] = GridField(xs, V)
        m = self.m_nodes(state.x["m"])
        report.extra["min_m"] = float(m.min())
        if m.min() < 0:
            log.warning("recovered density has negative values (min %.3e); not corrected", m.min())


def solve_fp_td(cfg: TimeDepConfig | TimeDepMFG, policy=None) -> tuple[np.ndarray, object]:
    """Density block under node policy values (or a policy field); returns ``(rho, m_model)``."""
    prob = cfg if isinstance(cfg, TimeDepMFG) else TimeDepMFG(cfg)
    st = prob.initial_state()
    st.q = _node_policy(prob, policy)
    sol = prob.solve_block("m", st)
    return sol.x, prob.gp_m.model(sol.x)


def solve_hjb_td(cfg: TimeDepConfig | TimeDepMFG, policy, m_model) -> tuple:
    """Value block under a policy and a density; returns ``(z, v, models)``."""
    prob = cfg if isinstance(cfg, TimeDepMFG) else TimeDepMFG(cfg)
    st = prob.initial_state()
    st.q = _node_policy(prob, policy)
    m = m_model(prob.Xi) if callable(m_model) else np.asarray(m_model, dtype=float)
    st.x["m"][prob.lay_m.index("r1")[: prob.Mi]] = m
    sol = prob.solve_block("u", st)
    models = {"u": prob.gp_u.model(sol.x)}
    v = None
    if prob.gp_v is not None:
        k = prob.lay_u["v1"].start
        v = sol.x[k:]
        models["V"] = prob.gp_v.model(sol.x)
        return sol.x[:k], v, models
    return sol.x, v, models


def _node_policy(prob: TimeDepMFG, policy) -> np.ndarray:
    if policy is None:
        return np.zeros((prob.Mi, prob.d))
    if hasattr(policy, "qvals"):
        return np.asarray(policy(prob.Xi), dtype=float).reshape(prob.Mi, prob.d)
    q = np.asarray(policy, dtype=float)
    return q.reshape(prob.Mi, prob.d) if q.size == prob.Mi * prob.d else np.broadcast_to(q, (prob.Mi, prob.d)).copy()


def gppi_td(cfg: TimeDepConfig) -> RunReport:
    return run_gppi(TimeDepMFG(cfg), cfg.controls)


def timedep_reference(cfg: TimeDepConfig, V=None, refine: int = 4, tol: float = 1e-8,
                      relaxation: float = 0.5) -> TimeDepReference:
    """Classical policy-iteration reference on a refined grid, sampled onto the output grid."""
    if cfg.dims != 1:
        raise ValueError("the finite-difference reference covers dims = 1")
    V = V or cfg.V
    ref = classical_pi_timedep(cfg.nx * refine, cfg.nt * refine, cfg.T, cfg.nu, V, cfg.F,
                               lambda x: cfg.m0(np.asarray(x)[:, None]), lambda x: cfg.U_T(np.asarray(x)[:, None]),
                               cfg.lower, cfg.period, tol=tol, relaxation=relaxation)
    g = cfg.grid()
    return TimeDepReference(g, sample_onto(ref.m, g), sample_onto(ref.u, g))
