"""
Hamiltonian families, pointwise policy improvement and GP policy fields.

Two sign conventions meet here.  The mean-field solvers maximize
``q.p - L(q)`` (so the quadratic family returns ``q = p``), while the
finite-horizon control problem minimizes ``p.f(x, q) + G(q)``, i.e. maximizes
``-p.f(x, q) - G(q)``.  :func:`improve_pointwise` follows the family's native
convention; :meth:`HamiltonianSpec.control_policy` always returns the minimizer
of ``p.f + G``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

from .gp_core import DEFAULT_NUGGET, nugget_diagonal
from .kernels import IDENTITY, MatrixKernelSpec, grad, op_block
from .errors import SingularSystemError

log = logging.getLogger(__name__)

DEFAULT_BOUND = 50.0


class HamiltonianFamily(str, Enum):
    QUADRATIC_ISOTROPIC = "quadratic"
    LQR_POWER_COST = "lqr_power"
    BOUNDED_NUMERIC = "bounded_numeric"


_ALIASES = {
    "quadratic": HamiltonianFamily.QUADRATIC_ISOTROPIC,
    "quadratic_isotropic": HamiltonianFamily.QUADRATIC_ISOTROPIC,
    "lqr_power": HamiltonianFamily.LQR_POWER_COST,
    "lqr_power_cost": HamiltonianFamily.LQR_POWER_COST,
    "lqr": HamiltonianFamily.LQR_POWER_COST,
    "bounded_numeric": HamiltonianFamily.BOUNDED_NUMERIC,
    "numeric": HamiltonianFamily.BOUNDED_NUMERIC,
}


def parse_hamiltonian(name) -> HamiltonianFamily:
    if isinstance(name, HamiltonianFamily):
        return name
    try:
        return _ALIASES[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown Hamiltonian family {name!r}") from None


@dataclass
class HamiltonianSpec:
    """Running cost and drift of the controlled dynamics.

    Parameters
    ----------
    family
        Quadratic (``L(q) = |q|^2/2``, drift ``q``), LQR with power cost
        (drift ``A x + B q``, cost ``(q^T R q)^(2/3)``) or a user cost ``L`` with
        numeric argmax over the ball ``|q| <= bound``.
    dims
        Control dimension (equals the spatial dimension).
    A, B, R_cost
        LQR data; scalars are promoted to ``s * I``.
    bound
        Policy-norm cap ``R``.
    cost
        Vectorized ``L(q)`` for the numeric family, ``q`` of shape ``(n, d)``.
    """

    family: HamiltonianFamily = HamiltonianFamily.QUADRATIC_ISOTROPIC
    dims: int = 1
    A: np.ndarray | float = 0.0
    B: np.ndarray | float = 1.0
    R_cost: np.ndarray | float = 1.0
    bound: float = DEFAULT_BOUND
    cost: Callable | None = None
    scan_points: int = 2001
    _Rinv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.family = parse_hamiltonian(self.family)
        d = self.dims
        if not (np.isfinite(self.bound) and self.bound > 0):
            raise ValueError("policy bound R must be positive")
        self.A = _as_matrix(self.A, d)
        self.B = _as_matrix(self.B, d)
        self.R_cost = _as_matrix(self.R_cost, d)
        if self.family is HamiltonianFamily.LQR_POWER_COST:
            if not np.allclose(self.R_cost, self.R_cost.T):
                raise ValueError("R_cost must be symmetric")
            if np.linalg.eigvalsh(self.R_cost)[0] <= 0:
                raise ValueError("R_cost must be positive definite")
            self._Rinv = np.linalg.inv(self.R_cost)
        if self.family is HamiltonianFamily.BOUNDED_NUMERIC and self.cost is None:
            raise ValueError("BoundedNumeric needs a cost callable")

    # -- problem data --------------------------------------------------

    def running_cost(self, q: np.ndarray) -> np.ndarray:
        """``L(q)`` per row of ``q`` (shape ``(n, d)``)."""
        q = np.atleast_2d(q)
        if self.family is HamiltonianFamily.QUADRATIC_ISOTROPIC:
            return 0.5 * np.sum(q * q, axis=1)
        if self.family is HamiltonianFamily.LQR_POWER_COST:
            s = np.einsum("ni,ij,nj->n", q, self.R_cost, q)
            return np.maximum(s, 0.0) ** (2.0 / 3.0)
        return np.asarray(self.cost(q), dtype=float)

    def running_cost_grad(self, q: np.ndarray) -> np.ndarray:
        """``dL/dq`` per row."""
        q = np.atleast_2d(q)
        if self.family is HamiltonianFamily.QUADRATIC_ISOTROPIC:
            return q.copy()
        if self.family is HamiltonianFamily.LQR_POWER_COST:
            s = np.einsum("ni,ij,nj->n", q, self.R_cost, q)
            with np.errstate(divide="ignore"):
                f = np.where(s > 0, (4.0 / 3.0) * s ** (-1.0 / 3.0), 0.0)
            return f[:, None] * (q @ self.R_cost)
        h = 1e-6
        out = np.empty_like(q, dtype=float)
        for a in range(q.shape[1]):
            e = np.zeros(q.shape[1])
            e[a] = h
            out[:, a] = (self.running_cost(q + e) - self.running_cost(q - e)) / (2 * h)
        return out

    def drift(self, x: np.ndarray, q: np.ndarray) -> np.ndarray:
        """``f(x, q)``; ``x`` holds the spatial coordinates, shape ``(n, d)``."""
        q = np.atleast_2d(q)
        if self.family is HamiltonianFamily.LQR_POWER_COST:
            return np.atleast_2d(x)[:, : self.dims] @ self.A.T + q @ self.B.T
        return q

    # -- policy improvement in the control (min) convention ----------------

    def control_policy(self, p: np.ndarray) -> np.ndarray:
        """Minimizer of ``p.f(x, q) + G(q)`` over admissible ``q``."""
        if self.family is HamiltonianFamily.LQR_POWER_COST:
            return improve_pointwise(p, self)
        return improve_pointwise(-np.atleast_2d(p), self)

    def control_policy_jacobian(self, p: np.ndarray) -> np.ndarray:
        if self.family is HamiltonianFamily.LQR_POWER_COST:
            return improve_jacobian(p, self)
        return -improve_jacobian(-np.atleast_2d(p), self)

    def to_dict(self) -> dict:
        out = {"family": self.family.value, "dims": self.dims, "bound": self.bound}
        if self.family is HamiltonianFamily.LQR_POWER_COST:
            out.update(A=self.A.tolist(), B=self.B.tolist(), R_cost=self.R_cost.tolist())
        return out


def _as_matrix(v, d: int) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return float(a) * np.eye(d)
    a = np.atleast_2d(a)
    if a.shape != (d, d):
        raise ValueError(f"expected a scalar or {d}x{d} matrix, got shape {a.shape}")
    return a


def _project_ball(p: np.ndarray, R: float) -> np.ndarray:
    nrm = np.linalg.norm(p, axis=1)
    scale = np.where(nrm > R, R / np.maximum(nrm, 1e-300), 1.0)
    return p * scale[:, None]


def _lqr_closed_form(p: np.ndarray, ham: HamiltonianSpec) -> np.ndarray:
    # stationary point of -p.Bq - (q^T R q)^(2/3):  q = -(27/64)(g^T R g) g,  g = R^-1 B^T p
    g = p @ ham.B @ ham._Rinv.T
    s = np.einsum("ni,ij,nj->n", g, ham.R_cost, g)
    return -(27.0 / 64.0) * s[:, None] * g


def _numeric_argmax(p: np.ndarray, ham: HamiltonianSpec) -> np.ndarray:
    n, d = p.shape
    R = ham.bound
    out = np.empty_like(p)
    if d == 1:
        grid = np.linspace(-R, R, ham.scan_points)
        step = grid[1] - grid[0]
        for i in range(n):
            vals = grid * p[i, 0] - ham.running_cost(grid[:, None])
            best = vals.max()
            # ties: smallest |q| among the maximizers
            cand = np.flatnonzero(vals >= best - 1e-14 * max(1.0, abs(best)))
            j = cand[np.argmin(np.abs(grid[cand]))]
            lo, hi = max(-R, grid[j] - step), min(R, grid[j] + step)
            res = minimize_scalar(lambda t: -(t * p[i, 0] - ham.running_cost(np.array([[t]]))[0]),
                                  bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
            q = res.x if -res.fun >= best else grid[j]
            out[i, 0] = q
        return out
    # low-dimensional fallback: tensor grid scan restricted to the ball, then a local polish
    m = int(round(ham.scan_points ** (1.0 / d)))
    axes = np.meshgrid(*[np.linspace(-R, R, m)] * d, indexing="ij")
    Q = np.stack([a.ravel() for a in axes], axis=1)
    Q = Q[np.linalg.norm(Q, axis=1) <= R]
    L = ham.running_cost(Q)
    nq = np.linalg.norm(Q, axis=1)
    from scipy.optimize import minimize

    for i in range(n):
        vals = Q @ p[i] - L
        best = vals.max()
        cand = np.flatnonzero(vals >= best - 1e-14 * max(1.0, abs(best)))
        q0 = Q[cand[np.argmin(nq[cand])]]
        res = minimize(lambda q: -(q @ p[i] - ham.running_cost(q[None, :])[0]), q0, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 4000})
        q = _project_ball(res.x[None, :], R)[0]
        out[i] = q if q @ p[i] - ham.running_cost(q[None, :])[0] >= best else q0
    return out


def improve_pointwise(grad_u, ham: HamiltonianSpec) -> np.ndarray:
    """Per-node maximizer of the family's Hamiltonian objective.

    Quadratic: ``argmax_{|q|<=R} q.p - |q|^2/2`` (projection of ``p`` onto the
    ball).  LQR: the closed-form stationary point of ``-p.Bq - (q^T R q)^(2/3)``.
    Numeric: ``argmax_{|q|<=R} q.p - L(q)`` by grid scan plus local polish.

    Parameters
    ----------
    grad_u : array, shape (n, d) or (d,)
    ham : HamiltonianSpec

    Returns
    -------
    ndarray, shape (n, d)
    """
    p = np.asarray(grad_u, dtype=float)
    if p.ndim == 1:
        p = p.reshape(-1, ham.dims) if ham.dims > 1 else p[:, None]
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite gradient passed to policy improvement")
    if ham.family is HamiltonianFamily.QUADRATIC_ISOTROPIC:
        return _project_ball(p, ham.bound)
    if ham.family is HamiltonianFamily.LQR_POWER_COST:
        q = _lqr_closed_form(p, ham)
        big = np.linalg.norm(q, axis=1) > ham.bound
        if np.any(big):
            log.warning("LQR policy exceeds the bound R=%g at %d nodes (bound not enforced)", ham.bound, big.sum())
        return q
    return _numeric_argmax(p, ham)


def improve_jacobian(grad_u, ham: HamiltonianSpec) -> np.ndarray:
    """``d argmax / dp`` per node, shape ``(n, d, d)``.

    The active set of the ball constraint is frozen: on the boundary the
    projection's tangential Jacobian ``(R/|p|)(I - p p^T/|p|^2)`` is used.
    """
    p = np.atleast_2d(np.asarray(grad_u, dtype=float))
    n, d = p.shape
    eye = np.broadcast_to(np.eye(d), (n, d, d))
    if ham.family is HamiltonianFamily.QUADRATIC_ISOTROPIC:
        nrm = np.linalg.norm(p, axis=1)
        out = np.array(eye)
        act = nrm > ham.bound
        if np.any(act):
            u = p[act] / nrm[act, None]
            out[act] = (ham.bound / nrm[act])[:, None, None] * (eye[act] - u[:, :, None] * u[:, None, :])
        return out
    if ham.family is HamiltonianFamily.LQR_POWER_COST:
        M = ham._Rinv @ ham.B.T  # g = M p
        g = p @ M.T
        s = np.einsum("ni,ij,nj->n", g, ham.R_cost, g)
        Rg = g @ ham.R_cost
        dq_dg = -(27.0 / 64.0) * (s[:, None, None] * eye + 2.0 * g[:, :, None] * Rg[:, None, :])
        return dq_dg @ M
    h = 1e-5
    out = np.empty((n, d, d))
    for a in range(d):
        e = np.zeros(d)
        e[a] = h
        out[:, :, a] = (improve_pointwise(p + e, ham) - improve_pointwise(p - e, ham)) / (2 * h)
    return out


# --------------------------------------------------------------------------
# policy fields
# --------------------------------------------------------------------------


@dataclass
class PolicyField:
    """Vector GP field with diagonal matrix kernel ``k I_d``; components decouple."""

    kernel: MatrixKernelSpec
    nodes: np.ndarray
    qvals: np.ndarray
    coeffs: np.ndarray
    factor: tuple = field(repr=False, default=None)

    @property
    def qvec(self) -> np.ndarray:
        """Node values stacked axis-major (length ``d * n``)."""
        return self.qvals.T.ravel()

    @property
    def dims(self) -> int:
        return self.kernel.dims

    def __call__(self, z) -> np.ndarray:
        return eval_policy(self, z)


def policy_gram_factor(kernel: MatrixKernelSpec, nodes: np.ndarray, eta: float = DEFAULT_NUGGET):
    K = op_block(kernel.scalar, IDENTITY, nodes, IDENTITY, nodes)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += nugget_diagonal(K, eta, mode="global")
    try:
        return sla.cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(K)
        raise SingularSystemError("policy Gram not positive definite", float(w[-1] / max(w[0], 1e-300)),
                                  "policy") from None


def _nodes(kernel: MatrixKernelSpec, nodes) -> np.ndarray:
    X = np.asarray(nodes, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def fit_policy_field(nodes, qvals, kernel: MatrixKernelSpec, eta: float = DEFAULT_NUGGET,
                     factor=None) -> PolicyField:
    """Condition each component of the policy on its node values."""
    X = _nodes(kernel, nodes)
    Q = np.asarray(qvals, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None] if kernel.dims == 1 else Q.reshape(kernel.dims, -1).T
    if Q.shape != (X.shape[0], kernel.dims):
        raise ValueError(f"qvals shape {Q.shape} does not match {X.shape[0]} nodes x {kernel.dims}")
    if X.shape[0] < 1:
        raise ValueError("at least one node required")
    if not np.all(np.isfinite(Q)):
        raise ValueError("non-finite policy values")
    if factor is None:
        factor = policy_gram_factor(kernel, X, eta)
    coeffs = sla.cho_solve(factor, Q)
    return PolicyField(kernel, X, Q, coeffs, factor)


def eval_policy(pf: PolicyField, z) -> np.ndarray:
    """Representer mean of the policy at one point (``(d,)``) or many (``(n, d)``)."""
    Z = np.asarray(z, dtype=float)
    single = Z.ndim <= 1 and (Z.size == pf.kernel.scalar.point_dim)
    Z = np.atleast_2d(Z) if single else (Z[:, None] if Z.ndim == 1 else Z)
    out = op_block(pf.kernel.scalar, IDENTITY, Z, IDENTITY, pf.nodes) @ pf.coeffs
    return out[0] if single else out


def div_policy(pf: PolicyField, z) -> np.ndarray | float:
    """Spatial divergence of the policy mean, analytic through kernel derivatives."""
    Z = np.asarray(z, dtype=float)
    single = Z.ndim <= 1 and (Z.size == pf.kernel.scalar.point_dim)
    Z = np.atleast_2d(Z) if single else (Z[:, None] if Z.ndim == 1 else Z)
    out = np.zeros(Z.shape[0])
    for a in range(pf.dims):
        out += op_block(pf.kernel.scalar, grad(a), Z, IDENTITY, pf.nodes) @ pf.coeffs[:, a]
    return float(out[0]) if single else out


def node_operators(kernel: MatrixKernelSpec, nodes, eval_points=None, eta: float = DEFAULT_NUGGET,
                   factor=None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Linear maps from node values to values / axis derivatives at ``eval_points``.

    Returns ``E`` with ``Q(eval) = E @ qvals`` (componentwise) and ``D[a]`` with
    ``d_a Q_a(eval) = D[a] @ qvals[:, a]``.
    """
    X = _nodes(kernel, nodes)
    P = X if eval_points is None else _nodes(kernel, eval_points)
    if factor is None:
        factor = policy_gram_factor(kernel, X, eta)
    K = op_block(kernel.scalar, IDENTITY, P, IDENTITY, X)
    E = sla.cho_solve(factor, K.T).T
    D = [sla.cho_solve(factor, op_block(kernel.scalar, grad(a), P, IDENTITY, X).T).T for a in range(kernel.dims)]
    return E, D


__all__ = [
    "HamiltonianFamily", "HamiltonianSpec", "PolicyField", "div_policy", "eval_policy", "fit_policy_field",
    "improve_jacobian", "improve_pointwise", "node_operators", "parse_hamiltonian",
]
