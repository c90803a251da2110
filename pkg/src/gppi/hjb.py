"""
GP policy iteration for the finite-horizon HJB equation

    dU/dt + (sigma^2/2) Lap U + min_q { grad U . f(x, q) + G(q) } + V(x) = 0,   U(., T) = U_T,

forward (``V`` known) or inverse (``V`` recovered from sparse observations of
``U`` and ``V``).

Collocation nodes are space-time points: ``M_int`` interior nodes with
``0 < t < T`` come first, followed by the terminal slice ``t = T``.  The value
block latent vector is laid out as

* ``z1`` values of ``U`` at all ``M`` nodes,
* ``z2`` time derivatives at interior nodes,
* ``z3_a`` spatial gradient components at interior nodes (axis-major),
* ``z4`` Laplacians at interior nodes,
* ``z5`` reads of ``U`` at its observation points,
* (inverse mode) ``v1`` values of ``V`` at the interior nodes' spatial
  coordinates and ``v2`` reads of ``V`` at its observation points.

Under a fixed policy the HJB rows eliminate ``z2``; the terminal rows pin
``z1`` on the last slice.  Observation reads that coincide with nodes are
tied to the node values.
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
from .policy import HamiltonianFamily, HamiltonianSpec, fit_policy_field
from .problem import PolicyIterationProblem, RunControls, Sensitivity, State, run_gppi
from .reference import Grid, GridField, fd_hjb_solve, l2_error, lqr_hamiltonian, sample_onto
from .report import RunReport

log = logging.getLogger(__name__)


@dataclass
class HJBConfig:
    """Finite-horizon HJB instance on ``[lower, lower + period)^dims x (0, T]``.

    The collocation grid has ``nx`` nodes per spatial axis and ``nt`` time
    levels ``T/nt, ..., T``; the last level is the terminal slice.
    ``sigma`` is a constant or a callable of the ``(n, dims + 1)`` space-time
    points.
    """

    dims: int = 1
    lower: float = -0.5
    period: float = 1.0
    T: float = 1.0
    nx: int = 22
    nt: int = 22
    sigma: float | Callable = float(np.sqrt(0.1))
    ham: HamiltonianSpec = None
    V: Callable[[np.ndarray], np.ndarray] | None = None
    U_T: Callable[[np.ndarray], np.ndarray] | None = None
    kernel_u: KernelSpec = None
    kernel_v: KernelSpec = None
    kernel_q: KernelSpec = None
    alpha_u: float = 0.5
    alpha_v: float = 0.0
    alpha_vo: float = 0.0
    alpha_uo: float = 0.0
    obs_u: Observations | None = None
    obs_v: Observations | None = None
    q_init: float = 0.0
    v_init: float = 0.0
    nugget: float = DEFAULT_NUGGET
    nugget_mode: str = "blockwise"
    controls: RunControls = field(default_factory=RunControls)
    reference: GridField | None = None

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.nt < 2:
            raise ValueError("need at least one interior time level (nt >= 2)")
        if self.nx < 1:
            raise ValueError("need at least one spatial node")
        if self.ham is None:
            self.ham = HamiltonianSpec(dims=self.dims)
        if self.kernel_u is None:
            self.kernel_u = KernelSpec("periodic_times_gaussian_time", (0.8, 1.0), dims=self.dims, has_time=True)
        if self.kernel_q is None:
            self.kernel_q = self.kernel_u
        if self.kernel_v is None:
            self.kernel_v = KernelSpec("gaussian_rbf", (0.6,), dims=self.dims)
        for name in ("alpha_u", "alpha_v", "alpha_vo", "alpha_uo"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.alpha_u <= 0:
            raise ValueError("alpha_u must be positive")
        if self.alpha_v == 0 and self.V is None:
            raise ValueError("forward mode (alpha_v = 0) needs the cost V")
        if self.U_T is None:
            raise ValueError("terminal cost U_T is required")
        if not self.kernel_u.has_time or not self.kernel_q.has_time:
            raise ValueError("kernel_u and kernel_q must be space-time kernels")
        if self.kernel_v.has_time:
            raise ValueError("kernel_v is a spatial kernel")

    @property
    def inverse(self) -> bool:
        return self.alpha_v > 0

    @property
    def times(self) -> np.ndarray:
        return self.T * np.arange(1, self.nt + 1) / self.nt

    def grid(self) -> Grid:
        """Space-time grid of all collocation nodes (1D space only)."""
        if self.dims != 1:
            raise ValueError("grid output is available for dims = 1")
        return Grid.space_time(self.nx, self.times, self.lower, self.period)

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Interior and terminal space-time nodes, each of shape ``(n, dims + 1)``."""
        axes = [self.lower + self.period * np.arange(self.nx) / self.nx] * self.dims
        mesh = np.meshgrid(*axes, indexing="ij")
        xs = np.stack([m.ravel() for m in mesh], axis=1)
        t = self.times
        inner = np.vstack([np.column_stack([xs, np.full(len(xs), tj)]) for tj in t[:-1]])
        term = np.column_stack([xs, np.full(len(xs), t[-1])])
        return inner, term


class HJBProblem(PolicyIterationProblem):
    name = "hjb"
    blocks = ("u",)
    change_block = "u"

    def __init__(self, cfg: HJBConfig):
        self.cfg = cfg
        d = cfg.dims
        self.d = d
        Xi, Xt = cfg.nodes()
        self.Xi, self.Xt = Xi, Xt
        self.X = np.vstack([Xi, Xt])
        Mi, M = Xi.shape[0], Xi.shape[0] + Xt.shape[0]
        self.Mi, self.M = Mi, M

        sig = cfg.sigma(Xi) if callable(cfg.sigma) else np.full(Mi, float(cfg.sigma))
        self.half_sig2 = 0.5 * np.asarray(sig, dtype=float) ** 2
        self.Ax = Xi[:, :d] @ cfg.ham.A.T if cfg.ham.family is HamiltonianFamily.LQR_POWER_COST else np.zeros((Mi, d))
        self.B = cfg.ham.B if cfg.ham.family is HamiltonianFamily.LQR_POWER_COST else np.eye(d)

        self.kq = MatrixKernelSpec(cfg.kernel_q, d)
        # the representer mean reproduces node values, so Q = q at the nodes
        self.E = np.eye(Mi)

        obs_u = cfg.obs_u if (cfg.obs_u is not None and cfg.alpha_uo > 0 and cfg.obs_u.size) else None
        obs_v = cfg.obs_v if (cfg.inverse and cfg.obs_v is not None and cfg.obs_v.size) else None
        self.obs_u, self.obs_v = obs_u, obs_v
        segs = [("z1", M), ("z2", Mi)] + [(f"z3_{a}", Mi) for a in range(d)] + [("z4", Mi)]
        if obs_u is not None:
            segs.append(("z5", obs_u.size))
        if cfg.inverse:
            segs.append(("v1", Mi))
            if obs_v is not None:
                segs.append(("v2", obs_v.size))
        lay = Layout(segs)
        self.lay = lay

        fb = [("z1", FunctionalBlock(IDENTITY, self.X)), ("z2", FunctionalBlock(DT, Xi))]
        fb += [(f"z3_{a}", FunctionalBlock(grad(a), Xi)) for a in range(d)]
        fb += [("z4", FunctionalBlock(LAPLACIAN, Xi))]
        if obs_u is not None:
            fb.append(("z5", FunctionalBlock(IDENTITY, obs_u.points)))
        self.gp_u = LatentGP(cfg.kernel_u, lay, fb, cfg.alpha_u, cfg.nugget, cfg.nugget_mode)
        terms = [self.gp_u.prior_term("u_prior")]
        tie = [self.gp_u.tie_rows()]
        if obs_u is not None:
            terms.append(ObjectiveTerm("u_obs", lay.index("z5"), np.eye(obs_u.size) / cfg.alpha_uo, obs_u.values))
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
        self.objectives = {"u": LatentObjective(lay.n, [t for t in terms if t is not None])}

        z1 = lay.index("z1")
        nT = Xt.shape[0]
        terminal = EqualityRows(lay.n, z1[Mi:], sp.csr_matrix((nT, lay.n)), np.asarray(cfg.U_T(Xt[:, :d]), float))
        self.static = EqualityRows.concat(lay.n, [terminal, *tie])

    # ------------------------------------------------------------------

    def drift(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Node policy values ``Q`` and drift ``f = A x + B Q``."""
        Q = np.array(q, dtype=float)
        return Q, self.Ax + Q @ self.B.T

    def _hjb_rows(self, q: np.ndarray) -> EqualityRows:
        lay, Mi, d = self.lay, self.Mi, self.d
        Q, f = self.drift(q)
        rows = np.arange(Mi)
        ri = [rows] * (d + 1)
        ci = [lay.index(f"z3_{a}") for a in range(d)] + [lay.index("z4")]
        vals = [-f[:, a] for a in range(d)] + [-self.half_sig2]
        const = -self.cfg.ham.running_cost(Q)
        if self.cfg.inverse:
            ri.append(rows)
            ci.append(lay.index("v1"))
            vals.append(-np.ones(Mi))
        else:
            const = const - self.V_nodes
        C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=(Mi, lay.n))
        return EqualityRows(lay.n, lay.index("z2"), C, const)

    def rows(self, block: str, state: State) -> EqualityRows:
        return EqualityRows.concat(self.lay.n, [self.static, self._hjb_rows(state.q)])

    def gradients(self, x: np.ndarray) -> np.ndarray:
        return np.stack([x[self.lay.index(f"z3_{a}")] for a in range(self.d)], axis=1)

    def improve(self, state: State) -> np.ndarray:
        # gradients come from the latent z3 entries, not from differentiating the fitted model
        return self.cfg.ham.control_policy(self.gradients(state.x["u"]))

    def policy_jacobian(self, state: State) -> np.ndarray:
        J = self.cfg.ham.control_policy_jacobian(self.gradients(state.x["u"]))
        Mi, d = self.Mi, self.d
        out = np.zeros((Mi * d, self.lay.n))
        rows = np.arange(Mi)
        for a in range(d):
            for b in range(d):
                out[a * Mi + rows, self.lay.index(f"z3_{b}")] = J[:, a, b]
        return out

    def sensitivities(self, block: str, state: State) -> dict[str, Sensitivity]:
        Mi, d, E, B = self.Mi, self.d, self.E, self.B
        n_static = self.static.targets.size
        z3 = [self.lay.index(f"z3_{b}") for b in range(d)]
        Q, _ = self.drift(state.q)
        Lg = self.cfg.ham.running_cost_grad(Q)

        def CTg(gt):
            g = gt[n_static:]
            out = np.zeros((self.lay.n, d * Mi))
            for a in range(d):
                for b in range(d):
                    if B[b, a] != 0:
                        out[z3[b], a * Mi : (a + 1) * Mi] += -B[b, a] * (g[:, None] * E)
            return out

        def Cx(x):
            out = np.zeros((n_static + Mi, d * Mi))
            for a in range(d):
                s = sum(B[b, a] * x[z3[b]] for b in range(d)) + Lg[:, a]
                out[n_static:, a * Mi : (a + 1) * Mi] = -(s[:, None] * E)
            return out

        return {"q": Sensitivity(CTg, Cx)}

    # ------------------------------------------------------------------

    def initial_state(self, evaluate: bool = True) -> State:
        """Starting iterate.

        With ``evaluate`` the value block holds the evaluation of the initial
        policy and ``q`` its improvement, so the first iteration compares two
        genuine evaluations instead of an evaluation against zeros.
        """
        x = np.zeros(self.lay.n)
        if self.cfg.inverse:
            x[self.lay["v1"]] = self.cfg.v_init
            if "v2" in self.lay:
                x[self.lay["v2"]] = self.cfg.v_init
        st = State({"u": x}, np.full((self.Mi, self.d), float(self.cfg.q_init)))
        if evaluate:
            st.x["u"] = self.solve_block("u", st).x
            st.q = self.improve(st)
        return st

    def node_volume(self) -> float:
        return self.cfg.T * self.cfg.period**self.d / self.M

    def change_index(self) -> np.ndarray:
        return self.lay.index("z1")[: self.Mi]

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """``(z, v)`` parts of a latent vector."""
        if self.cfg.inverse:
            k = self.lay["v1"].start
            return x[:k], x[k:]
        return x, None

    def errors(self, state: State) -> tuple[float, float]:
        ref = self.cfg.reference
        if ref is None:
            return float("nan"), float("nan")
        est = GridField(ref.grid, self.gp_u.model(state.x["u"])(ref.grid.points))
        return float("nan"), l2_error(est, ref)

    def models(self, state: State) -> dict:
        out = {"u": self.gp_u.model(state.x["u"]),
               "Q": fit_policy_field(self.Xi, state.q, self.kq, self.cfg.nugget)}
        if self.gp_v is not None:
            out["V"] = self.gp_v.model(state.x["u"])
        return out

    def V_values(self, state: State, points: np.ndarray) -> np.ndarray:
        if self.gp_v is not None:
            return self.gp_v.model(state.x["u"])(points)
        return np.asarray(self.cfg.V(points), dtype=float)

    def finalize(self, report: RunReport, state: State) -> None:
        models = self.models(state)
        report.models = models
        if self.d == 1:
            g = self.cfg.grid()
            report.fields = {"u": GridField(g, models["u"](g.points))}
            xs = Grid.periodic_box(self.cfg.nx, 1, self.cfg.lower, self.cfg.period)
            report.fields["V"] = GridField(xs, self.V_values(state, xs.points))
        report.extra["terminal_residual"] = float(np.abs(self.static.residual(state.x["u"])).max(initial=0.0))


def evaluate_policy_hjb(cfg: HJBConfig | HJBProblem, qvals) -> tuple[np.ndarray, np.ndarray | None, dict]:
    """One policy evaluation: returns ``(z, v, models)`` for node policy values ``qvals``."""
    prob = cfg if isinstance(cfg, HJBProblem) else HJBProblem(cfg)
    st = prob.initial_state(evaluate=False)
    q = np.asarray(qvals, dtype=float)
    st.q = q.reshape(prob.Mi, prob.d) if q.size == prob.Mi * prob.d else np.broadcast_to(q, st.q.shape).copy()
    sol = prob.solve_block("u", st)
    z, v = prob.split(sol.x)
    models = {"u": prob.gp_u.model(sol.x)}
    if prob.gp_v is not None:
        models["V"] = prob.gp_v.model(sol.x)
    return z, v, models


def gppi_hjb(cfg: HJBConfig) -> RunReport:
    return run_gppi(HJBProblem(cfg), cfg.controls)


def hjb_reference(cfg: HJBConfig, refine: int = 8) -> GridField:
    """Finite-difference reference for an LQR-type 1D config, sampled on the collocation grid."""
    ham = cfg.ham
    if cfg.dims != 1 or ham.family is not HamiltonianFamily.LQR_POWER_COST:
        raise ValueError("the finite-difference reference covers the 1D LQR family")
    if callable(cfg.sigma):
        raise ValueError("the finite-difference reference needs a constant sigma")
    nx = cfg.nx * refine
    times = np.linspace(0.0, cfg.T, cfg.nt * refine + 1)
    fine = Grid.space_time(nx, times, cfg.lower, cfg.period)
    V = cfg.V
    H, dH = lqr_hamiltonian(float(ham.A[0, 0]), float(ham.B[0, 0]), float(ham.R_cost[0, 0]),
                            lambda x: V(np.asarray(x)[:, None]))
    U = fd_hjb_solve(fine, float(cfg.sigma), H, lambda x: cfg.U_T(np.asarray(x)[:, None]), dH)
    return sample_onto(U, cfg.grid())
