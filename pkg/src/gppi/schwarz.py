"""
Additive Schwarz Newton acceleration of GP policy iteration.

The unknowns are the free latent coordinates of every QP block plus the node
policy values, ``w = (w_m, w_u, q)``.  One sweep applies the three update
maps to the *same* iterate (Jacobi style) and yields

    F(w) = w - (L_1(w), L_2(w), L_3(w)).

Each block map minimizes a quadratic whose stationarity residual is
``R_b(w) = A_b^T grad f_b(A_b w_b + c_b)`` with ``A_b`` depending on the other
blocks through the equality rows; the policy residual is
``R_3 = q - argmax(grad u)``.  Since ``dR_b/dw_b`` is the block's normal matrix
``N_b`` (already factored by the sweep), ``J = diag(N_m, N_u, I)`` gives
``J F = R`` and the Newton increment solves ``-(dR/dw) dw = J F``.  Only four
off-diagonal blocks are nonzero: dR_m/dq, dR_u/dm, dR_u/dq and dR_q/du.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import SingularSystemError
from .problem import BlockSolution, PolicyIterationProblem, RunControls, State, q_flat, q_unflat
from .report import IterationRecord, RunReport

log = logging.getLogger(__name__)


@dataclass
class SchwarzOptions:
    damping: float = 1.0
    jacobian_point: str = "mixed"  # or "current"
    divergence_factor: float = 10.0
    divergence_window: int = 3

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.jacobian_point not in ("mixed", "current"):
            raise ValueError("jacobian_point must be 'mixed' or 'current'")


@dataclass
class Sweep:
    """Result of one Jacobi sweep at ``state``."""

    state: State
    half: State
    F: np.ndarray
    solutions: dict[str, BlockSolution]
    free: dict[str, np.ndarray]
    slices: dict[str, slice]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.F))


class SchwarzNewton:
    """Newton iteration on the fixed-point residual of one policy-iteration problem."""

    def __init__(self, problem: PolicyIterationProblem, options: SchwarzOptions | None = None):
        self.problem = problem
        self.options = options or SchwarzOptions()

    # ------------------------------------------------------------------

    def layout(self, state: State, solutions: dict[str, BlockSolution]) -> tuple[dict, dict, int]:
        free, slices = {}, {}
        off = 0
        for b in self.problem.blocks:
            free[b] = solutions[b].elim.free
            slices[b] = slice(off, off + free[b].size)
            off += free[b].size
        slices["q"] = slice(off, off + state.q.size)
        return free, slices, off + state.q.size

    def pack(self, state: State, free: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([state.x[b][free[b]] for b in self.problem.blocks] + [q_flat(state.q)])

    def consistent(self, state: State) -> State:
        """Re-expand every block from its free coordinates so the rows hold at ``state.q``."""
        new = state.copy()
        for b in self.problem.blocks:
            elim = _elimination(self.problem, b, new)
            new.x[b] = elim.expand(new.x[b][elim.free])
        return new

    def sweep(self, state: State) -> Sweep:
        """All block maps and the policy map evaluated at the same iterate."""
        prob = self.problem
        state = self.consistent(state)
        sols = {b: prob.solve_block(b, state) for b in prob.blocks}
        q_half = prob.improve(state)
        half = State({b: sols[b].x for b in prob.blocks}, q_half)
        free, slices, _ = self.layout(state, sols)
        w = self.pack(state, free)
        w_half = np.concatenate([sols[b].w for b in prob.blocks] + [q_flat(q_half)])
        return Sweep(state, half, w - w_half, sols, free, slices)

    # ------------------------------------------------------------------

    def _block_rows(self, b: str, sw: Sweep, n_total: int) -> np.ndarray:
        """``dR_b/dw`` for a QP block (one block row of the Jacobian)."""
        prob = self.problem
        sol = sw.solutions[b]
        elim = sol.elim
        obj = prob.objectives[b]
        x_own = sol.x if self.options.jacobian_point == "mixed" else sw.state.x[b]
        out = np.zeros((elim.free.size, n_total))
        out[:, sw.slices[b]] = sol.normal
        G = obj.gradient(x_own)
        gt = elim.propagate_adjoint(G[elim.rows.targets])
        for src, sens in prob.sensitivities(b, sw.state).items():
            CTg = sens.CTg(gt)
            Dx = np.zeros((elim.n, CTg.shape[1]))
            Dx[elim.rows.targets] = elim.propagate(sens.Cx(x_own))
            blk = elim.A.T @ (CTg + obj.hessian_apply(Dx))
            if src == "q":
                out[:, sw.slices["q"]] += blk
            else:
                # latent of the source block -> its free coordinates
                out[:, sw.slices[src]] += blk @ sw.solutions[src].elim.A
        return out

    def assemble_jacobian(self, sw: Sweep) -> tuple[list[np.ndarray], np.ndarray]:
        """Block-diagonal ``J`` (cached normal matrices) and the full ``dR/dw``."""
        prob = self.problem
        n_total = sw.F.size
        J = [sw.solutions[b].normal for b in prob.blocks]
        nq = sw.state.q.size
        J.append(np.eye(nq))
        rows = [self._block_rows(b, sw, n_total) for b in prob.blocks]
        pol = np.zeros((nq, n_total))
        pol[:, sw.slices["q"]] = np.eye(nq)
        vb = prob.value_block
        pol[:, sw.slices[vb]] -= prob.policy_jacobian(sw.state) @ sw.solutions[vb].elim.A
        rows.append(pol)
        return J, np.vstack(rows)

    def apply_J(self, J: list[np.ndarray], sw: Sweep) -> np.ndarray:
        parts = []
        keys = list(self.problem.blocks) + ["q"]
        for Jb, k in zip(J, keys):
            parts.append(Jb @ sw.F[sw.slices[k]])
        return np.concatenate(parts)

    def newton_step(self, sw: Sweep, J: list[np.ndarray], dRdw: np.ndarray) -> State:
        """Solve ``-(dR/dw) dw = J F`` by pivoted LU and return the updated state."""
        rhs = self.apply_J(J, sw)
        if not np.any(rhs):
            return sw.state.copy()
        try:
            lu, piv = sla.lu_factor(dRdw, check_finite=True)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise SingularSystemError(f"increment system could not be factored ({exc}); "
                                      "try damping < 1 or plain sweeps") from None
        d = np.abs(np.diag(lu))
        cond = float(d.max() / d.min()) if d.min() > 0 else float("inf")
        if not np.isfinite(cond) or cond > 1e15:
            raise SingularSystemError("increment system is singular; try damping < 1 or plain sweeps",
                                      condition=cond, block="newton")
        dw = -sla.lu_solve((lu, piv), rhs)
        w = self.pack(sw.state, sw.free) + self.options.damping * dw
        return self.unpack(w, sw)

    def unpack(self, w: np.ndarray, sw: Sweep) -> State:
        prob = self.problem
        d = sw.state.q.shape[1]
        new = sw.state.copy()
        new.q = q_unflat(w[sw.slices["q"]], d)
        for b in prob.blocks:
            # rows of later blocks may read earlier blocks (u reads m), so expand in order
            elim = _elimination(prob, b, new)
            new.x[b] = elim.expand(w[sw.slices[b]])
        return new

    # ------------------------------------------------------------------

    def solve(self, controls: RunControls, method: str = "as") -> RunReport:
        prob = self.problem
        report = RunReport(problem=prob.name, method=method)
        t0 = time.perf_counter()
        state = prob.initial_state()
        em, eu = prob.errors(state)
        report.history.append(IterationRecord(0, em, eu, float("nan"), 0.0))
        norms = []
        converged = False
        k = 0
        linear = []
        for k in range(1, controls.max_iter + 1):
            ts = time.perf_counter()
            sw = self.sweep(state)
            report.add_time("sweep", time.perf_counter() - ts)
            fn = sw.norm
            norms.append(fn)
            if not np.isfinite(fn):
                report.message = "non-finite residual"
                break
            w = self.options.divergence_window
            if len(norms) > w and fn > self.options.divergence_factor * norms[-1 - w]:
                report.message = f"diverged: |F| grew from {norms[-1 - w]:.3e} to {fn:.3e} in {w} steps"
                break
            ts = time.perf_counter()
            J, dRdw = self.assemble_jacobian(sw)
            report.add_time("jacobian", time.perf_counter() - ts)
            ts = time.perf_counter()
            try:
                new = self.newton_step(sw, J, dRdw)
            except SingularSystemError as exc:
                report.message = str(exc)
                break
            report.add_time("linear_solve", time.perf_counter() - ts)
            linear.append(dRdw.shape[0])
            change = prob.change(state, new)
            state = new
            em, eu = prob.errors(state)
            report.history.append(IterationRecord(k, em, eu, fn, time.perf_counter() - t0, change))
            log.debug("%s AS iter %d |F| %.3e change %.3e err_m %.3e", prob.name, k, fn, change, em)
            if change < controls.tol:
                converged = True
                break
        report.converged = converged
        report.iterations = k if controls.max_iter > 0 else 0
        if not converged and not report.message:
            report.message = f"no convergence after {controls.max_iter} iterations"
        report.extra["newton_unknowns"] = linear[-1] if linear else 0
        report.extra["residual_norms"] = norms
        report.timings["total"] = time.perf_counter() - t0
        report.lam = prob.lam(state)
        report.state = state
        prob.finalize(report, state)
        return report


def _elimination(prob: PolicyIterationProblem, block: str, state: State):
    from .gp_core import eliminate_constraints

    return eliminate_constraints(prob.objectives[block].n, prob.rows(block, state))


def sweep(problem: PolicyIterationProblem, state: State) -> Sweep:
    return SchwarzNewton(problem).sweep(state)


def assemble_jacobian(problem: PolicyIterationProblem, sw: Sweep, options: SchwarzOptions | None = None):
    return SchwarzNewton(problem, options).assemble_jacobian(sw)


def newton_step(problem: PolicyIterationProblem, sw: Sweep, J, dRdw, options: SchwarzOptions | None = None) -> State:
    return SchwarzNewton(problem, options).newton_step(sw, J, dRdw)


def as_newton_solve(problem: PolicyIterationProblem, controls: RunControls,
                    options: SchwarzOptions | None = None) -> RunReport:
    return SchwarzNewton(problem, options).solve(controls)
