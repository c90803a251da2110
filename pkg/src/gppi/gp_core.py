"""
Linear-functional algebra over an RKHS.

A latent vector collects the values of linear functionals (Dirac evaluations
composed with differential operators) applied to an unknown function.  The
minimum-norm function matching those values is the representer mean
``K(., phi) K(phi, phi)^-1 z`` and its squared norm is ``z^T K(phi, phi)^-1 z``.
Every policy-evaluation step therefore reduces to a quadratic objective in the
latent values subject to linear equality rows; eliminating the constrained
entries leaves an unconstrained problem

    min_w (Xi w + y)^T Gamma^-1 (Xi w + y)

with ``Gamma`` block diagonal (Gram blocks and noise covariances).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConstraintError, KernelError, SingularSystemError
from .kernels import IDENTITY, DiffOp, KernelSpec, OpKind, check_op, grad, op_block

log = logging.getLogger(__name__)

DEFAULT_NUGGET = 1e-8
NUGGET_MODES = ("global", "blockwise")


# --------------------------------------------------------------------------
# functionals
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearFunctional:
    """A single Dirac-composed operator, or a weighted sum of them.

    ``points`` is ``(n, D)``; for an atomic functional ``n == 1`` and
    ``weights`` is ``None``.
    """

    op: DiffOp
    points: np.ndarray
    weights: np.ndarray | None = None

    @classmethod
    def dirac(cls, point, op: DiffOp = IDENTITY) -> "LinearFunctional":
        return cls(op, np.atleast_2d(np.asarray(point, dtype=float)))

    @classmethod
    def weighted_sum(cls, points, weights, op: DiffOp = IDENTITY) -> "LinearFunctional":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(op, pts, np.asarray(weights, dtype=float))


@dataclass(frozen=True)
class FunctionalBlock:
    """Functionals sharing one operator, one per point (or one per weight row).

    ``weights`` of shape ``(k, n)`` turns the block into ``k`` sum-functionals
    over the ``n`` points.
    """

    op: DiffOp
    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        object.__setattr__(self, "points", pts)
        if self.weights is not None:
            w = np.atleast_2d(np.asarray(self.weights, dtype=float))
            if w.shape[1] != pts.shape[0]:
                raise ValueError("weights must have one column per point")
            object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.points.shape[0] if self.weights is None else self.weights.shape[0]

    @classmethod
    def from_functional(cls, f: LinearFunctional) -> "FunctionalBlock":
        w = None if f.weights is None else f.weights[None, :]
        return cls(f.op, f.points, w)


def gradient_blocks(points: np.ndarray, dims: int) -> list[FunctionalBlock]:
    """Gradient functionals at ``points``, expanded axis-major."""
    return [FunctionalBlock(grad(a), points) for a in range(dims)]


def as_blocks(functionals: Iterable) -> list[FunctionalBlock]:
    out = []
    for f in functionals:
        if isinstance(f, FunctionalBlock):
            out.append(f)
        elif isinstance(f, LinearFunctional):
            out.append(FunctionalBlock.from_functional(f))
        else:
            raise TypeError(f"not a functional: {f!r}")
    return out


def block_sizes(blocks: Sequence[FunctionalBlock]) -> list[int]:
    return [b.size for b in blocks]


def _pair_block(kernel: KernelSpec, a: FunctionalBlock, b: FunctionalBlock) -> np.ndarray:
    M = op_block(kernel, a.op, a.points, b.op, b.points)
    if a.weights is not None:
        M = a.weights @ M
    if b.weights is not None:
        M = M @ b.weights.T
    return M


def cross_gram(kernel: KernelSpec, left: Sequence, right: Sequence) -> np.ndarray:
    """Matrix of ``(left_i x right_j) k`` over two functional lists."""
    left, right = as_blocks(left), as_blocks(right)
    for blk in (*left, *right):
        check_op(kernel, blk.op)
    rows = [np.hstack([_pair_block(kernel, a, b) for b in right]) for a in left]
    return np.vstack(rows) if rows else np.zeros((0, sum(block_sizes(right))))


def assemble_gram(kernel: KernelSpec, functionals: Sequence) -> np.ndarray:
    """Symmetric Gram matrix of a functional list (no nugget)."""
    blocks = as_blocks(functionals)
    for blk in blocks:
        check_op(kernel, blk.op)
    n = len(blocks)
    sizes = block_sizes(blocks)
    offs = np.concatenate([[0], np.cumsum(sizes)])
    G = np.empty((offs[-1], offs[-1]))
    for i in range(n):
        for j in range(i, n):
            B = _pair_block(kernel, blocks[i], blocks[j])
            G[offs[i] : offs[i + 1], offs[j] : offs[j + 1]] = B
            if j != i:
                G[offs[j] : offs[j + 1], offs[i] : offs[i + 1]] = B.T
    # exact symmetry: the diagonal blocks are symmetric up to rounding only
    return 0.5 * (G + G.T)


def nugget_diagonal(G: np.ndarray, eta: float = DEFAULT_NUGGET, sizes: Sequence[int] | None = None,
                    mode: str = "blockwise") -> np.ndarray:
    """Diagonal added to ``G`` before factorization.

    ``global``: ``eta * tr(G)/n`` everywhere.  ``blockwise``: each functional
    block gets ``eta`` times its own mean diagonal, so derivative blocks with
    large variance do not swamp the value block.
    """
    if eta < 0:
        raise ValueError("nugget must be >= 0")
    n = G.shape[0]
    diag = np.diag(G)
    if mode == "global" or sizes is None:
        return np.full(n, eta * (diag.sum() / max(n, 1)))
    if mode != "blockwise":
        raise ValueError(f"unknown nugget mode {mode!r}")
    out = np.empty(n)
    start = 0
    for s in sizes:
        seg = diag[start : start + s]
        out[start : start + s] = eta * (seg.mean() if s else 0.0)
        start += s
    return out


def regularized_gram(kernel: KernelSpec, functionals: Sequence, eta: float = DEFAULT_NUGGET,
                     mode: str = "blockwise") -> np.ndarray:
    blocks = as_blocks(functionals)
    G = assemble_gram(kernel, blocks)
    return G + np.diag(nugget_diagonal(G, eta, block_sizes(blocks), mode))


# --------------------------------------------------------------------------
# Gaussian-process model (representer formula)
# --------------------------------------------------------------------------


@dataclass
class GPModel:
    """Representer mean ``K(., phi) coeffs`` with ``coeffs = (K(phi, phi) + nugget)^-1 z``."""

    kernel: KernelSpec
    functionals: list[FunctionalBlock]
    coeffs: np.ndarray
    nugget: float = DEFAULT_NUGGET

    def __post_init__(self):
        self.functionals = as_blocks(self.functionals)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.nugget < 0:
            raise ValueError("nugget must be >= 0")
        if self.coeffs.shape[0] != sum(block_sizes(self.functionals)):
            raise ValueError("coeffs length must equal the expanded functional count")

    @classmethod
    def condition(cls, kernel: KernelSpec, functionals: Sequence, values, eta: float = DEFAULT_NUGGET,
                  mode: str = "blockwise", factor=None) -> "GPModel":
        """Model interpolating ``values`` of ``functionals`` (after nugget)."""
        blocks = as_blocks(functionals)
        if factor is None:
            factor = sla.cho_factor(regularized_gram(kernel, blocks, eta, mode), lower=True)
        coeffs = sla.cho_solve(factor, np.asarray(values, dtype=float))
        return cls(kernel, blocks, coeffs, eta)

    def cross(self, points, op: DiffOp = IDENTITY) -> np.ndarray:
        return cross_gram(self.kernel, [FunctionalBlock(op, np.atleast_2d(points))], self.functionals)

    def __call__(self, points, op: DiffOp = IDENTITY) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None] if self.kernel.point_dim == 1 else pts[None, :]
        return self.cross(pts, op) @ self.coeffs


def representer_eval(model: GPModel, z, op: DiffOp = IDENTITY) -> float:
    """``op`` applied to the representer mean, at a single point ``z``."""
    check_op(model.kernel, op)
    pts = np.atleast_2d(np.asarray(z, dtype=float))
    if model.kernel.point_dim == 1:
        pts = pts.reshape(-1, 1)
    return float(model(pts[:1], op)[0])


# --------------------------------------------------------------------------
# observations
# --------------------------------------------------------------------------


@dataclass
class Observations:
    """Pointwise noisy data ``values`` at ``points`` with precision ``alpha``."""

    points: np.ndarray
    values: np.ndarray
    precision: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.shape[0] != self.points.shape[0]:
            raise ValueError("one value per observation point required")
        if not (np.isfinite(self.precision) and self.precision > 0):
            raise ValueError("precision must be finite and positive")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def block(self) -> FunctionalBlock:
        return FunctionalBlock(IDENTITY, self.points)

    @classmethod
    def empty(cls, point_dim: int) -> "Observations":
        return cls(np.zeros((0, point_dim)), np.zeros(0), 1.0)


# --------------------------------------------------------------------------
# block-diagonal weighting and the affine least-squares problem
# --------------------------------------------------------------------------


class Weighting:
    """Block-diagonal SPD ``Gamma``; each block is Cholesky-factored once.

    ``Gamma^-1`` is never formed: products go through triangular solves.
    """

    def __init__(self, blocks: Sequence[np.ndarray]):
        self.blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
        self.sizes = [b.shape[0] for b in self.blocks]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.chol = []
        for k, B in enumerate(self.blocks):
            if B.shape[0] != B.shape[1]:
                raise ValueError("Gamma blocks must be square")
            if not np.allclose(B, B.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(B).max())):
                raise ValueError(f"Gamma block {k} is not symmetric")
            try:
                self.chol.append(np.linalg.cholesky(B))
            except np.linalg.LinAlgError:
                w = np.linalg.eigvalsh(B)
                raise SingularSystemError(f"Gamma block {k} is not positive definite",
                                          condition=float(w[-1] / max(w[0], 1e-300)), block=str(k)) from None

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def whiten(self, X: np.ndarray) -> np.ndarray:
        """``L^-1 X`` with ``Gamma = L L^T``."""
        X = np.asarray(X, dtype=float)
        out = np.empty_like(X)
        for k, L in enumerate(self.chol):
            s = slice(self.offsets[k], self.offsets[k + 1])
            if L.shape[0] == 1:
                out[s] = X[s] / L[0, 0]
            else:
                out[s] = sla.solve_triangular(L, X[s], lower=True, check_finite=False)
        return out

    def solve(self, X: np.ndarray) -> np.ndarray:
        """``Gamma^-1 X``."""
        X = np.asarray(X, dtype=float)
        out = np.empty_like(X)
        for k, L in enumerate(self.chol):
            s = slice(self.offsets[k], self.offsets[k + 1])
            out[s] = sla.cho_solve((L, True), X[s], check_finite=False)
        return out

    def dense(self) -> np.ndarray:
        return sla.block_diag(*self.blocks) if self.blocks else np.zeros((0, 0))


@dataclass
class AffineQP:
    """``min_w (Xi w + y)^T Gamma^-1 (Xi w + y)``."""

    Xi: np.ndarray
    y: np.ndarray
    Gamma: Weighting

    def __post_init__(self):
        if not isinstance(self.Gamma, Weighting):
            self.Gamma = Weighting([self.Gamma])
        self.Xi = np.atleast_2d(np.asarray(self.Xi, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.Xi.shape[0] != self.y.shape[0] or self.Xi.shape[0] != self.Gamma.size:
            raise ValueError(
                f"inconsistent dimensions: Xi {self.Xi.shape}, y {self.y.shape}, Gamma {self.Gamma.size}"
            )

    def objective(self, w) -> float:
        r = self.Xi @ np.asarray(w, dtype=float) + self.y
        rt = self.Gamma.whiten(r)
        return float(rt @ rt)

    def gradient(self, w) -> np.ndarray:
        """First-order residual ``Xi^T Gamma^-1 (Xi w + y)`` (half the objective gradient)."""
        r = self.Xi @ np.asarray(w, dtype=float) + self.y
        return self.Xi.T @ self.Gamma.solve(r)


@dataclass
class QPSolution:
    w: np.ndarray
    normal: np.ndarray
    factor: tuple | None
    method: str
    condition: float = float("nan")
    whitened: np.ndarray | None = field(default=None, repr=False)

    def solve_normal(self, rhs: np.ndarray) -> np.ndarray:
        """Apply ``(Xi^T Gamma^-1 Xi)^-1`` reusing the factorization."""
        if self.factor is not None and self.method == "cholesky":
            return sla.cho_solve(self.factor, rhs, check_finite=False)
        vals, vecs = self.factor
        return vecs @ ((vecs.T @ rhs) / vals[:, None] if np.ndim(rhs) == 2 else (vecs.T @ rhs) / vals)


def factor_normal(N: np.ndarray, pinv_threshold: float = 1e-12) -> tuple[tuple, str, float]:
    """Cholesky of a symmetric normal matrix, with an eigen pseudo-inverse fallback."""
    N = 0.5 * (N + N.T)
    if not np.all(np.isfinite(N)):
        raise SingularSystemError("normal matrix has non-finite entries")
    try:
        fac = sla.cho_factor(N, lower=True, check_finite=False)
        d = np.diag(fac[0]) ** 2
        # a collapsed pivot means Cholesky only succeeded by rounding
        if np.all(np.isfinite(d)) and d.min() > pinv_threshold * d.max():
            return fac, "cholesky", float(d.max() / d.min())
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(N)
    top = vals[-1]
    if not np.isfinite(top) or top <= 0:
        raise SingularSystemError("normal matrix is not positive semidefinite", condition=float("inf"))
    keep = vals > pinv_threshold * top
    cond = float(top / vals[keep][0])
    dropped = int((~keep).sum())
    if dropped:
        log.warning("normal matrix: Cholesky failed, pseudo-inverse drops %d directions", dropped)
    vals = np.where(keep, vals, np.inf)
    return (vals, vecs), "eigh", cond


def solve_affine_qp(qp: AffineQP, pinv_threshold: float = 1e-12) -> QPSolution:
    """Unique minimizer ``-(Xi^T G^-1 Xi)^-1 Xi^T G^-1 y``."""
    Xt = qp.Gamma.whiten(qp.Xi)
    yt = qp.Gamma.whiten(qp.y)
    N = Xt.T @ Xt
    rhs = -(Xt.T @ yt)
    fac, method, cond = factor_normal(N, pinv_threshold)
    sol = QPSolution(np.empty(0), N, fac, method, cond, Xt)
    sol.w = sol.solve_normal(rhs)
    return sol


# --------------------------------------------------------------------------
# elimination of equality rows
# --------------------------------------------------------------------------


@dataclass
class EqualityRows:
    """Rows ``x[targets[k]] = C[k] @ x + c[k]``.

    ``C`` may reference free entries and targets of *earlier* rows only.
    """

    n: int
    targets: np.ndarray
    C: sp.csr_matrix
    c: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=int).ravel()
        self.C = sp.csr_matrix(self.C, shape=(self.targets.size, self.n))
        self.c = np.asarray(self.c, dtype=float).ravel()
        if self.c.size != self.targets.size:
            raise ValueError("one constant per equality row")

    @classmethod
    def empty(cls, n: int) -> "EqualityRows":
        return cls(n, np.zeros(0, int), sp.csr_matrix((0, n)), np.zeros(0))

    @staticmethod
    def concat(n: int, parts: Sequence["EqualityRows"]) -> "EqualityRows":
        parts = [p for p in parts if p.targets.size]
        if not parts:
            return EqualityRows.empty(n)
        return EqualityRows(n, np.concatenate([p.targets for p in parts]),
                            sp.vstack([p.C for p in parts]).tocsr(),
                            np.concatenate([p.c for p in parts]))

    def residual(self, x: np.ndarray) -> np.ndarray:
        return x[self.targets] - self.C @ x - self.c


@dataclass
class Elimination:
    """Affine embedding ``x = A w + b`` of the free entries ``w`` into the latent vector."""

    A: np.ndarray
    b: np.ndarray
    free: np.ndarray
    rows: EqualityRows
    chained: bool

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def expand(self, w: np.ndarray) -> np.ndarray:
        return self.A @ w + self.b

    def restrict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[self.free]

    def _chain_factor(self):
        # I - C restricted to eliminated rows/columns (nilpotent C, so always invertible)
        if getattr(self, "_chain", None) is None:
            pos = np.full(self.n, -1)
            pos[self.rows.targets] = np.arange(self.rows.targets.size)
            C = self.rows.C.tocoo()
            keep = pos[C.col] >= 0
            nE = self.rows.targets.size
            Cee = sp.csc_matrix((C.data[keep], (C.row[keep], pos[C.col[keep]])), shape=(nE, nE))
            self._chain = spla.splu((sp.identity(nE, format="csc") - Cee).tocsc())
        return self._chain

    def propagate(self, D: np.ndarray) -> np.ndarray:
        """Solve ``Y = D + C_E Y`` over the eliminated rows (identity when unchained)."""
        if not self.chained:
            return D
        return self._chain_factor().solve(np.asarray(D, dtype=float))

    def propagate_adjoint(self, g: np.ndarray) -> np.ndarray:
        """Solve ``y = g + C_E^T y`` (transpose of :meth:`propagate`)."""
        if not self.chained:
            return g
        return self._chain_factor().solve(np.asarray(g, dtype=float), trans="T")


def _levels(rows: EqualityRows, order: np.ndarray) -> tuple[np.ndarray, bool]:
    C = rows.C.tocoo()
    ref = order[C.col]
    dep = ref >= 0
    r, j = C.row[dep], ref[dep]
    if np.any(r == j):
        k = int(r[np.argmax(r == j)])
        raise ConstraintError(f"row {k} (target {int(rows.targets[k])}) references its own target")
    level = np.zeros(rows.targets.size, int)
    if r.size == 0:
        return level, False
    for _ in range(rows.targets.size + 1):
        new = np.zeros_like(level)
        np.maximum.at(new, r, level[j] + 1)
        if np.array_equal(new, level):
            return level, True
        level = new
    raise ConstraintError("equality rows are cyclic; they are not triangular in the designated variables")


def eliminate_constraints(n: int, rows: EqualityRows | None = None) -> Elimination:
    """Substitute equality rows to express the latent vector through its free entries.

    Rows may reference targets of other rows as long as the references are
    acyclic; substitution proceeds in dependency levels, one sparse-dense
    product per level.
    """
    if rows is None:
        rows = EqualityRows.empty(n)
    t = rows.targets
    if np.unique(t).size != t.size:
        raise ConstraintError("a latent entry is eliminated by more than one row")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise ConstraintError("elimination target out of range")
    is_target = np.zeros(n, bool)
    is_target[t] = True
    free = np.flatnonzero(~is_target)
    order = np.full(n, -1)
    order[t] = np.arange(t.size)
    level, chained = _levels(rows, order)

    A = np.zeros((n, free.size))
    A[free, np.arange(free.size)] = 1.0
    b = np.zeros(n)
    Cd = rows.C.tocsr()
    for lev in range(level.max() + 1 if t.size else 0):
        ks = np.flatnonzero(level == lev)
        sub = Cd[ks]
        A[t[ks]] = sub @ A
        b[t[ks]] = rows.c[ks] + sub @ b
    return Elimination(A, b, free, rows, chained)


def duplicate_map(points_a: np.ndarray, points_b: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """For each row of ``points_b`` the index of an identical row of ``points_a`` (or -1)."""
    A = np.atleast_2d(points_a)
    B = np.atleast_2d(points_b)
    out = np.full(B.shape[0], -1)
    if A.size == 0 or B.size == 0:
        return out
    d = np.abs(B[:, None, :] - A[None, :, :]).max(axis=2)
    j = d.argmin(axis=1)
    hit = d[np.arange(B.shape[0]), j] <= tol
    out[hit] = j[hit]
    return out


def unique_points(points: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Indices of first occurrences and, per point, the index of its representative."""
    P = np.atleast_2d(points)
    rep = np.arange(P.shape[0])
    first = []
    for i in range(P.shape[0]):
        if first:
            d = np.abs(P[first] - P[i]).max(axis=1)
            k = int(d.argmin())
            if d[k] <= tol:
                rep[i] = first[k]
                continue
        first.append(i)
    return np.asarray(first, int), rep


# --------------------------------------------------------------------------
# quadratic objectives over latent vectors
# --------------------------------------------------------------------------


@dataclass
class ObjectiveTerm:
    """``(x[idx] - data)^T Gamma_block^-1 (x[idx] - data)``."""

    name: str
    idx: np.ndarray
    gamma: np.ndarray
    data: np.ndarray | None = None


class LatentObjective:
    """Sum of weighted quadratic terms over a latent vector of length ``n``.

    Zero-weight terms are dropped by the caller; ``Gamma`` is factored here once
    and reused across every iteration that changes only the constraints.
    """

    def __init__(self, n: int, terms: Sequence[ObjectiveTerm]):
        self.n = n
        self.terms = list(terms)
        self.idx = np.concatenate([np.asarray(t.idx, int) for t in self.terms]) if self.terms else np.zeros(0, int)
        self.data = np.concatenate([
            np.zeros(len(t.idx)) if t.data is None else np.asarray(t.data, float) for t in self.terms
        ]) if self.terms else np.zeros(0)
        self.Gamma = Weighting([t.gamma for t in self.terms])

    def affine_qp(self, elim: Elimination) -> AffineQP:
        return AffineQP(elim.A[self.idx], elim.b[self.idx] - self.data, self.Gamma)

    def residual(self, x: np.ndarray) -> np.ndarray:
        return x[self.idx] - self.data

    def value(self, x: np.ndarray) -> float:
        rt = self.Gamma.whiten(self.residual(x))
        return float(rt @ rt)

    def lift(self, r: np.ndarray) -> np.ndarray:
        """``T^T r``: scatter stacked residual rows back onto latent coordinates."""
        out = np.zeros((self.n,) + np.shape(r)[1:])
        np.add.at(out, self.idx, r)
        return out

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """``T^T Gamma^-1 (T x - d)``."""
        return self.lift(self.Gamma.solve(self.residual(x)))

    def hessian_apply(self, X: np.ndarray) -> np.ndarray:
        """``T^T Gamma^-1 T X``."""
        return self.lift(self.Gamma.solve(np.asarray(X)[self.idx]))


def solve_latent_qp(objective: LatentObjective, rows: EqualityRows,
                    pinv_threshold: float = 1e-12) -> tuple[np.ndarray, Elimination, QPSolution]:
    """Eliminate ``rows``, solve the reduced least squares, re-expand."""
    elim = eliminate_constraints(objective.n, rows)
    sol = solve_affine_qp(objective.affine_qp(elim), pinv_threshold)
    return elim.expand(sol.w), elim, sol


def solve_latent_qp_kkt(objective: LatentObjective, rows: EqualityRows) -> tuple[np.ndarray, np.ndarray]:
    """Independent Lagrange-multiplier solve of the same problem (dense KKT system).

    Returns the latent minimizer and the multipliers.
    """
    n = objective.n
    H = objective.hessian_apply(np.eye(n))
    h = objective.lift(objective.Gamma.solve(objective.data))
    B = -rows.C.toarray()
    B[np.arange(rows.targets.size), rows.targets] += 1.0
    m = B.shape[0]
    K = np.block([[H, B.T], [B, np.zeros((m, m))]])
    rhs = np.concatenate([h, rows.c])
    sol = sla.solve(K, rhs, assume_a="sym")
    return sol[:n], sol[n:]


class Layout:
    """Named contiguous segments of a latent vector."""

    def __init__(self, segments: Sequence[tuple[str, int]]):
        self.names = [s for s, _ in segments]
        self.sizes = [int(k) for _, k in segments]
        offs = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self._slices = {name: slice(int(offs[i]), int(offs[i + 1])) for i, name in enumerate(self.names)}
        self.n = int(offs[-1])

    def __getitem__(self, name: str) -> slice:
        return self._slices[name]

    def index(self, name: str) -> np.ndarray:
        s = self._slices[name]
        return np.arange(s.start, s.stop)

    def __contains__(self, name: str) -> bool:
        return name in self._slices


class LatentGP:
    """One GP prior over a group of latent segments.

    ``segments`` pairs a layout name with the functional block whose values
    that segment holds.  Segments entries repeating an earlier (operator,
    point) pair are the same functional; they are tied to their first
    occurrence by equality rows and left out of the Gram matrix, which would
    otherwise be singular.
    """

    def __init__(self, kernel: KernelSpec, layout: Layout, segments: Sequence[tuple[str, FunctionalBlock]],
                 alpha: float, eta: float = DEFAULT_NUGGET, nugget_mode: str = "blockwise"):
        self.kernel = kernel
        self.alpha = float(alpha)
        self.names = [name for name, _ in segments]
        blocks = []
        idx = []
        for name, blk in segments:
            if blk.size != layout.sizes[layout.names.index(name)]:
                raise ValueError(f"segment {name} has {layout.sizes[layout.names.index(name)]} entries "
                                 f"but {blk.size} functionals")
            blocks.append(blk)
            idx.append(layout.index(name))
        self.index = np.concatenate(idx) if idx else np.zeros(0, int)

        keep_blocks, keep_idx, dup_t, dup_r = [], [], [], []
        for op in dict.fromkeys(b.op for b in blocks):
            same = [(b, ix) for b, ix in zip(blocks, idx) if b.op == op and b.weights is None]
            if not same:
                continue
            pts = np.vstack([b.points for b, _ in same])
            gidx = np.concatenate([ix for _, ix in same])
            first, rep = unique_points(pts)
            dup = np.flatnonzero(rep != np.arange(rep.size))
            dup_t.append(gidx[dup])
            dup_r.append(gidx[rep[dup]])
        dups = set(np.concatenate(dup_t).tolist()) if dup_t else set()
        for b, ix in zip(blocks, idx):
            if b.weights is not None:
                keep_blocks.append(b)
                keep_idx.append(ix)
                continue
            mask = np.array([g not in dups for g in ix], bool)
            if mask.any():
                keep_blocks.append(FunctionalBlock(b.op, b.points[mask]))
                keep_idx.append(ix[mask])
        self.blocks = keep_blocks
        self.unique_index = np.concatenate(keep_idx) if keep_idx else np.zeros(0, int)
        self.dup_targets = np.concatenate(dup_t) if dup_t else np.zeros(0, int)
        self.dup_sources = np.concatenate(dup_r) if dup_r else np.zeros(0, int)

        G = assemble_gram(kernel, self.blocks)
        self.gram = G + np.diag(nugget_diagonal(G, eta, block_sizes(self.blocks), nugget_mode))
        self.factor = sla.cho_factor(self.gram, lower=True)
        self.eta = eta
        self.n = layout.n

    def prior_term(self, name: str) -> ObjectiveTerm | None:
        if self.alpha <= 0:
            return None
        return ObjectiveTerm(name, self.unique_index, self.gram / self.alpha)

    def tie_rows(self) -> EqualityRows:
        k = self.dup_targets.size
        C = sp.csr_matrix((np.ones(k), (np.arange(k), self.dup_sources)), shape=(k, self.n))
        return EqualityRows(self.n, self.dup_targets, C, np.zeros(k))

    def model(self, x: np.ndarray) -> GPModel:
        coeffs = sla.cho_solve(self.factor, np.asarray(x)[self.unique_index])
        return GPModel(self.kernel, self.blocks, coeffs, self.eta)


def point_array(points, point_dim: int) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None] if point_dim == 1 else pts[None, :]
    if pts.shape[1] != point_dim:
        raise KernelError(f"expected points with {point_dim} coordinates, got {pts.shape[1]}")
    return pts


__all__ = [
    "AffineQP", "Elimination", "EqualityRows", "FunctionalBlock", "GPModel", "LatentObjective", "Layout",
    "LinearFunctional", "ObjectiveTerm", "Observations", "OpKind", "QPSolution", "Weighting",
    "assemble_gram", "cross_gram", "eliminate_constraints", "gradient_blocks", "nugget_diagonal",
    "regularized_gram", "representer_eval", "solve_affine_qp", "solve_latent_qp", "solve_latent_qp_kkt",
]
