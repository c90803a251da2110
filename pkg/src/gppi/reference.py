"""
Grid reference solvers and the discretized L2 metric.

All spatial grids are periodic with ``n`` nodes per axis on ``[lower, lower + L)``;
time axes (when present) are non-periodic and stored last.  Finite differences
are centered: second differences for the Laplacian, first differences for
gradients.  The Fokker-Planck operator is the exact transpose of the HJB
drift-diffusion operator, so the discrete mass ``sum(m) h^d`` is conserved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CFLError, GPPIError

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Tensor grid; values on it are stored flat, first axis slowest.

    ``starts`` are the first node coordinates, ``spacings`` the steps.  For a
    periodic axis ``count * spacing`` equals the period.
    """

    counts: tuple[int, ...]
    spacings: tuple[float, ...]
    starts: tuple[float, ...]
    periodic: tuple[bool, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        k = len(self.counts)
        if not (len(self.spacings) == len(self.starts) == len(self.periodic) == k):
            raise ValueError("grid axis descriptors must have equal length")
        if any(c < 1 for c in self.counts) or any(h <= 0 for h in self.spacings):
            raise ValueError("grid counts and spacings must be positive")
        if not self.names:
            default = ["x", "y", "z"][: k - 1] + ["t"] if k and not self.periodic[-1] else ["x", "y", "z"][:k]
            object.__setattr__(self, "names", tuple(default))

    @classmethod
    def periodic_box(cls, n: int | Sequence[int], dims: int = 1, lower: float = 0.0, period: float = 1.0) -> "Grid":
        ns = (n,) * dims if np.isscalar(n) else tuple(n)
        return cls(tuple(int(v) for v in ns), tuple(period / v for v in ns), (lower,) * dims, (True,) * dims)

    @classmethod
    def space_time(cls, nx: int, times: Sequence[float], lower: float = -0.5, period: float = 1.0) -> "Grid":
        times = np.asarray(times, dtype=float)
        ht = float(times[1] - times[0]) if times.size > 1 else 1.0
        if times.size > 1 and not np.allclose(np.diff(times), ht):
            raise ValueError("time nodes must be uniform")
        return cls((nx, times.size), (period / nx, ht), (lower, float(times[0])), (True, False))

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    def axis(self, k: int) -> np.ndarray:
        return self.starts[k] + self.spacings[k] * np.arange(self.counts[k])

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*[self.axis(k) for k in range(len(self.counts))], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class GridField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.grid.size:
            raise ValueError(f"{self.values.size} values for a grid of {self.grid.size} nodes")

    def reshaped(self) -> np.ndarray:
        return self.values.reshape(self.grid.counts)


def l2_error(u: GridField, v: GridField) -> float:
    """``sqrt(prod(h) * sum |u - v|^2)`` over a shared grid."""
    if u.grid != v.grid:
        raise GPPIError("l2_error needs fields on identical grids")
    d = u.values - v.values
    return float(np.sqrt(u.grid.cell_volume * np.dot(d, d)))


# --------------------------------------------------------------------------
# periodic stencils
# --------------------------------------------------------------------------


def _circ(n: int, offsets: dict[int, float]) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    idx = np.arange(n)
    for off, val in offsets.items():
        rows.append(idx)
        cols.append((idx + off) % n)
        vals.append(np.full(n, val))
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    M.sum_duplicates()
    return M


def periodic_operators(counts: Sequence[int], spacings: Sequence[float]) -> tuple[list[sp.csr_matrix], sp.csr_matrix]:
    """Centered gradient components and Laplacian on a periodic tensor grid (first axis slowest)."""
    d = len(counts)
    grads = []
    lap = sp.csr_matrix((int(np.prod(counts)),) * 2)
    for a in range(d):
        n, h = counts[a], spacings[a]
        D1 = _circ(n, {1: 0.5 / h, -1: -0.5 / h}) if n > 2 else sp.csr_matrix((n, n))
        D2 = _circ(n, {1: 1 / h**2, 0: -2 / h**2, -1: 1 / h**2})
        left = sp.identity(int(np.prod(counts[:a])), format="csr")
        right = sp.identity(int(np.prod(counts[a + 1 :])), format="csr")
        grads.append(sp.kron(sp.kron(left, D1), right, format="csr"))
        lap = lap + sp.kron(sp.kron(left, D2), right, format="csr")
    return grads, lap.tocsr()


# --------------------------------------------------------------------------
# HJB finite differences (finite horizon, LQR-type Hamiltonian)
# --------------------------------------------------------------------------


def fd_hjb_solve(grid: Grid, sigma: float, hamiltonian: Callable[[np.ndarray, np.ndarray], np.ndarray],
                 U_T: Callable[[np.ndarray], np.ndarray], dH_dp: Callable | None = None,
                 cfl: float = 1.0) -> GridField:
    """Backward semi-implicit scheme for ``dU/dtau = sigma^2/2 U_xx - H(x, U_x)``.

    ``grid`` is a 1D space x time grid whose time axis holds the output
    times ending at ``T`` (the last node); the scheme steps from ``T`` down to
    the first time node with step ``h_t``: implicit diffusion, explicit
    Hamiltonian evaluated with the centered gradient.

    Parameters
    ----------
    hamiltonian : callable (x, p) -> H, vectorized
    dH_dp : callable (x, p) -> dH/dp, optional
        Used for the CFL check ``h_t * max|dH/dp| <= cfl * h_x``.
    """
    if len(grid.counts) != 2 or grid.periodic != (True, False):
        raise ValueError("fd_hjb_solve needs a 1D periodic space x time grid")
    nx, nt = grid.counts
    hx, ht = grid.spacings
    x = grid.axis(0)
    (D1,), lap = periodic_operators([nx], [hx])
    A = (sp.identity(nx) - ht * 0.5 * sigma**2 * lap).tocsc()
    solve = spla.factorized(A)
    U = np.empty((nx, nt))
    U[:, -1] = U_T(x)
    for j in range(nt - 1, 0, -1):
        u = U[:, j]
        p = D1 @ u
        if dH_dp is not None:
            speed = np.abs(dH_dp(x, p)).max()
            if ht * speed > cfl * hx:
                raise CFLError(f"explicit Hamiltonian step violates CFL (speed {speed:.3g})",
                               suggested_dt=cfl * hx / speed)
        rhs = u - ht * hamiltonian(x, p)
        U[:, j - 1] = solve(rhs)
        if np.abs(A @ U[:, j - 1] - rhs).max() > 1e-10 * (1 + np.abs(rhs).max()):
            raise GPPIError("HJB step residual above 1e-10")
    return GridField(grid, U.ravel())


def lqr_hamiltonian(A: float, B: float, R_cost: float, V: Callable[[np.ndarray], np.ndarray]):
    """``H(x, p) = -pAx - V(x) + 27 (pB)^4 / (256 c^3)``, ``c = R^(2/3)``, and ``dH/dp``."""
    c3 = R_cost**2  # (R^(2/3))^3

    def H(x, p):
        return -p * A * x - V(x) + 27.0 * (p * B) ** 4 / (256.0 * c3)

    def dH(x, p):
        return -A * x + 108.0 * B**4 * p**3 / (256.0 * c3)

    return H, dH


def sample_onto(field: GridField, coarse: Grid) -> GridField:
    """Restrict a fine-grid field to the nodes of ``coarse`` (nodes must coincide)."""
    fine = field.grid
    idx = []
    for k in range(len(coarse.counts)):
        fx = fine.axis(k)
        cx = coarse.axis(k)
        j = np.rint((cx - fine.starts[k]) / fine.spacings[k]).astype(int)
        if fine.periodic[k]:
            j %= fine.counts[k]
        if np.any(j < 0) or np.any(j >= fine.counts[k]) or not np.allclose(fx[j] % 1e9, cx % 1e9, atol=1e-9):
            raise ValueError(f"coarse axis {k} nodes are not fine-grid nodes")
        idx.append(j)
    vals = field.reshaped()[np.ix_(*idx)]
    return GridField(coarse, vals.ravel())


# --------------------------------------------------------------------------
# classical policy iteration for MFG
# --------------------------------------------------------------------------


@dataclass
class MFGReference:
    m: GridField
    u: GridField
    lam: float | None
    iterations: int


def classical_pi_stationary(grid: Grid, nu: float, V: Callable[[np.ndarray], np.ndarray],
                            F: Callable[[np.ndarray], np.ndarray], mass: float = 1.0,
                            tol: float = 1e-8, max_iter: int = 500) -> MFGReference:
    """Policy iteration for ``-nu Lap u + |grad u|^2/2 + lam = V + F(m)``, ``-nu Lap m - div(m grad u) = 0``.

    Each iteration solves the FP equation under the current drift (bordered
    with the mass row), then the linear HJB under the same drift (bordered
    with the zero-mean row, ``lam`` the extra unknown), then sets the drift to
    the centered gradient of ``u``.
    """
    if not all(grid.periodic):
        raise ValueError("stationary reference needs a periodic grid")
    n = grid.size
    hd = grid.cell_volume
    grads, lap = periodic_operators(grid.counts, grid.spacings)
    d = len(grads)
    Vx = V(grid.points)
    ones = np.ones((n, 1))
    Q = np.zeros((n, d))
    m = np.full(n, mass / (n * hd))
    u = np.zeros(n)
    lam = 0.0
    for it in range(1, max_iter + 1):
        drift = sum(sp.diags(Q[:, a]) @ grads[a] for a in range(d))
        L = (-nu * lap + drift).tocsr()
        K = sp.bmat([[L.T, sp.csr_matrix(ones)], [sp.csr_matrix(hd * ones.T), None]], format="csc")
        sol = spla.spsolve(K, np.concatenate([np.zeros(n), [mass]]))
        m_new = sol[:n]
        rhs = 0.5 * np.sum(Q * Q, axis=1) + Vx + F(m_new)
        K = sp.bmat([[L, sp.csr_matrix(ones)], [sp.csr_matrix(hd * ones.T), None]], format="csc")
        sol = spla.spsolve(K, np.concatenate([rhs, [0.0]]))
        u, lam = sol[:n], float(sol[n])
        Q = np.stack([g @ u for g in grads], axis=1)
        change = np.sqrt(hd * np.sum((m_new - m) ** 2))
        m = m_new
        # the first FP solve runs under the initial drift, so its change carries no information
        if it > 1 and change < tol:
            return MFGReference(GridField(grid, m), GridField(grid, u), lam, it)
    raise GPPIError(f"classical policy iteration did not converge in {max_iter} iterations")


def classical_pi_timedep(nx: int, nt: int, T: float, nu: float, V: Callable[[np.ndarray], np.ndarray],
                         F: Callable[[np.ndarray], np.ndarray], m0: Callable[[np.ndarray], np.ndarray],
                         U_T: Callable[[np.ndarray], np.ndarray], lower: float = -0.5, period: float = 1.0,
                         tol: float = 1e-8, max_iter: int = 500, relaxation: float = 1.0) -> MFGReference:
    """Implicit-Euler policy iteration for the 1D time-dependent MFG.

    ``-u_t - nu u_xx + Q u_x = Q^2/2 + V + F(m)``, ``u(T) = U_T``;
    ``m_t - nu m_xx - (m Q)_x = 0``, ``m(0) = m0``; ``Q = u_x``.
    The returned fields live on ``nx`` periodic nodes times ``nt + 1`` time
    levels ``0, T/nt, ..., T``.

    ``relaxation`` under-relaxes the policy update, ``Q <- (1 - w) Q + w u_x``.
    The fixed point is unchanged; strong couplings make the plain update
    (``w = 1``) oscillate with a period-two mode that decays very slowly.
    """
    if not 0 < relaxation <= 1:
        raise ValueError("relaxation must lie in (0, 1]")
    hx = period / nx
    ht = T / nt
    x = lower + hx * np.arange(nx)
    (D1,), lap = periodic_operators([nx], [hx])
    I = sp.identity(nx, format="csr")
    Vx = V(x[:, None])
    m = np.empty((nt + 1, nx))
    u = np.empty((nt + 1, nx))
    Q = np.zeros((nt + 1, nx))
    m[:] = m0(x)
    m_prev = m.copy()
    for it in range(1, max_iter + 1):
        m[0] = m0(x)
        for j in range(1, nt + 1):
            op = (I / ht - nu * lap - D1 @ sp.diags(Q[j])).tocsc()
            m[j] = spla.spsolve(op, m[j - 1] / ht)
        u[nt] = U_T(x)
        for j in range(nt - 1, -1, -1):
            op = (I / ht - nu * lap + sp.diags(Q[j]) @ D1).tocsc()
            rhs = u[j + 1] / ht + 0.5 * Q[j] ** 2 + Vx + F(m[j])
            u[j] = spla.spsolve(op, rhs)
        Q = (1.0 - relaxation) * Q + relaxation * np.stack([D1 @ u[j] for j in range(nt + 1)])
        change = np.sqrt(hx * ht * np.sum((m - m_prev) ** 2))
        log.debug("timedep PI iter %d change %.3e", it, change)
        m_prev = m.copy()
        if it > 1 and change < tol:
            grid = Grid.space_time(nx, np.linspace(0.0, T, nt + 1), lower=lower, period=period)
            return MFGReference(GridField(grid, m.T.ravel()), GridField(grid, u.T.ravel()), None, it)
    raise GPPIError(f"time-dependent policy iteration did not converge in {max_iter} iterations")


def classical_pi_mfg(config, grid: Grid | None = None, **kwargs) -> MFGReference:
    """Classical policy-iteration reference for a stationary or time-dependent MFG config.

    Stationary configs (``n``, ``nu``, ``V``, ``F``) are solved on ``grid``
    (default: the config's collocation grid) and return ``(m, u, lam)``.
    Time-dependent configs (with ``nt``) use the grid's spatial count and
    time levels; ``lam`` is then ``None``.  Extra keywords go to the solver.
    """
    if hasattr(config, "nt"):
        if config.V is None:
            raise ValueError("the reference needs the true cost V")
        g = grid if grid is not None else config.grid()
        nx, nlev = g.counts
        return classical_pi_timedep(nx, nlev - 1, config.T, config.nu, config.V, config.F,
                                    lambda x: config.m0(np.asarray(x)[:, None]),
                                    lambda x: config.U_T(np.asarray(x)[:, None]),
                                    g.starts[0], g.counts[0] * g.spacings[0], **kwargs)
    if config.V is None:
        raise ValueError("the reference needs the true cost V")
    g = grid if grid is not None else config.grid()
    return classical_pi_stationary(g, config.nu, config.V, config.F, getattr(config, "mass", 1.0), **kwargs)
