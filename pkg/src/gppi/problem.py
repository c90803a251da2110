"""
Shared machinery for GP policy iteration.

A problem is a set of QP blocks (one per unknown field group, e.g. ``m`` and
``u``) plus a pointwise policy update.  Each block minimizes a fixed quadratic
objective over its latent vector subject to equality rows that depend on the
current policy (and, for the value-function block, on the density).  The same
interface feeds both the plain policy-iteration loop below and the Schwarz
Newton accelerator, which additionally needs the row sensitivities.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gp_core import EqualityRows, Elimination, LatentObjective, QPSolution, eliminate_constraints, solve_affine_qp
from .report import IterationRecord, RunReport

log = logging.getLogger(__name__)


@dataclass
class BlockSolution:
    """Minimizer of one block QP together with the factorization that produced it."""

    x: np.ndarray
    elim: Elimination
    qp: QPSolution

    @property
    def w(self) -> np.ndarray:
        return self.qp.w

    @property
    def normal(self) -> np.ndarray:
        return self.qp.normal


@dataclass
class State:
    """Latent vectors per block plus node policy values ``q`` of shape ``(n, d)``."""

    x: dict[str, np.ndarray]
    q: np.ndarray

    def copy(self) -> "State":
        return State({k: v.copy() for k, v in self.x.items()}, self.q.copy())


@dataclass
class Sensitivity:
    """Derivative of a block's equality rows with respect to a parameter vector ``theta``.

    ``CTg(gt)`` returns ``sum_k gt[k] dC[k, :]/dtheta`` as an ``(n, p)`` matrix
    and ``Cx(x)`` returns ``dC/dtheta x + dc/dtheta`` as ``(n_rows, p)``.
    """

    CTg: Callable[[np.ndarray], np.ndarray]
    Cx: Callable[[np.ndarray], np.ndarray]


@dataclass
class RunControls:
    max_iter: int = 100
    tol: float = 1e-6


class PolicyIterationProblem:
    """Interface implemented by the HJB and MFG solvers.

    Subclasses set ``name``, ``blocks`` (solve order), ``objectives`` (one
    :class:`LatentObjective` per block) and implement the abstract methods.
    """

    name = "problem"
    blocks: tuple[str, ...] = ()
    value_block = "u"
    change_block = "u"

    objectives: dict[str, LatentObjective]

    # -- block solves --------------------------------------------------

    def rows(self, block: str, state: State) -> EqualityRows:
        raise NotImplementedError

    def solve_block(self, block: str, state: State) -> BlockSolution:
        rows = self.rows(block, state)
        obj = self.objectives[block]
        elim = eliminate_constraints(obj.n, rows)
        sol = solve_affine_qp(obj.affine_qp(elim))
        x = elim.expand(sol.w)
        self.check_rows(block, rows, x)
        return BlockSolution(x, elim, sol)

    def check_rows(self, block: str, rows: EqualityRows, x: np.ndarray, tol: float = 1e-8) -> None:
        r = rows.residual(x)
        if r.size:
            scale = 1.0 + np.abs(x).max()
            worst = np.abs(r).max()
            if worst > tol * scale:
                log.warning("%s block: hard constraint residual %.3e", block, worst)

    # -- policy ----------------------------------------------------------

    def improve(self, state: State) -> np.ndarray:
        raise NotImplementedError

    def policy_jacobian(self, state: State) -> np.ndarray:
        """``d q / d x_value`` as a ``(q.size, n_value)`` matrix (axis-major ``q``)."""
        raise NotImplementedError

    # -- sensitivities for the Newton accelerator --------------------------

    def sensitivities(self, block: str, state: State) -> dict[str, Sensitivity]:
        """Row sensitivities of ``block`` w.r.t. other blocks' latent vectors and ``q``."""
        raise NotImplementedError

    # -- bookkeeping -------------------------------------------------------

    def initial_state(self) -> State:
        raise NotImplementedError

    def node_volume(self) -> float:
        raise NotImplementedError

    def change(self, old: State, new: State) -> float:
        """Discretized L2 change of the monitored field, guarded by the policy change.

        The guard matters at the first iteration: the first density solve runs
        under the initial policy and can reproduce the initial guess exactly.
        """
        idx = self.change_index()
        diff = new.x[self.change_block][idx] - old.x[self.change_block][idx]
        dq = new.q - old.q
        vol = self.node_volume()
        return float(max(np.sqrt(vol * np.sum(diff * diff)), np.sqrt(vol * np.sum(dq * dq))))

    def change_index(self) -> np.ndarray:
        raise NotImplementedError

    def errors(self, state: State) -> tuple[float, float]:
        """Discretized L2 errors of (m, u) against the attached reference, NaN if none."""
        return float("nan"), float("nan")

    def finalize(self, report: RunReport, state: State) -> None:
        """Attach fields, models and scalars to a finished report."""

    def lam(self, state: State) -> float | None:
        return None


def q_flat(q: np.ndarray) -> np.ndarray:
    """Axis-major flattening of node policy values."""
    return np.asarray(q).T.ravel()


def q_unflat(v: np.ndarray, d: int) -> np.ndarray:
    return np.asarray(v).reshape(d, -1).T


def run_gppi(problem: PolicyIterationProblem, controls: RunControls, method: str = "gppi") -> RunReport:
    """Plain policy iteration: solve the blocks in order, then update the policy."""
    report = RunReport(problem=problem.name, method=method)
    t0 = time.perf_counter()
    state = problem.initial_state()
    em, eu = problem.errors(state)
    report.history.append(IterationRecord(0, em, eu, float("nan"), 0.0))
    converged = False
    k = 0
    for k in range(1, controls.max_iter + 1):
        new = state.copy()
        for blk in problem.blocks:
            ts = time.perf_counter()
            sol = problem.solve_block(blk, new)
            new.x[blk] = sol.x
            report.add_time(f"solve_{blk}", time.perf_counter() - ts)
        ts = time.perf_counter()
        new.q = problem.improve(new)
        report.add_time("policy", time.perf_counter() - ts)
        change = problem.change(state, new)
        state = new
        em, eu = problem.errors(state)
        report.history.append(IterationRecord(k, em, eu, change, time.perf_counter() - t0, change))
        log.debug("%s gppi iter %d change %.3e err_m %.3e", problem.name, k, change, em)
        if not np.isfinite(change):
            report.message = "non-finite iterate"
            break
        if change < controls.tol:
            converged = True
            break
    report.converged = converged
    report.iterations = k if controls.max_iter > 0 else 0
    if not converged and not report.message:
        report.message = f"no convergence after {controls.max_iter} iterations"
    report.timings["total"] = time.perf_counter() - t0
    report.lam = problem.lam(state)
    report.state = state
    problem.finalize(report, state)
    return report
