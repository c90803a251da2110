"""
Covariance kernels on the torus (optionally times a time axis) and their
closed-form compositions with differential operators.

Every family here is a product of one-dimensional factors

    k(z, z') = prod_a f_a(z_a - z'_a),

with ``f`` either the periodic factor ``exp((cos(2*pi*tau/P) - 1)/l**2)``
(equivalently ``exp(-2 sin^2(pi*tau/P)/l**2)``) or the Gaussian factor
``exp(-tau**2/s**2)``.  A differential operator is expanded into a sum of
multi-indices, and an operator pair applied to ``k`` becomes a sum of products
of factor derivatives.  Derivatives of the factors up to fourth order are
hard-coded, which is enough for (Laplacian, Laplacian) blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import KernelError

MAX_ORDER = 4


class KernelFamily(str, Enum):
    PERIODIC_1D = "periodic1d"
    GAUSSIAN_RBF = "gaussian_rbf"
    PERIODIC_TIMES_GAUSSIAN_TIME = "periodic_times_gaussian_time"
    PRODUCT_PERIODIC = "product_periodic"


_FAMILY_ALIASES = {
    "periodic": KernelFamily.PERIODIC_1D,
    "periodic1d": KernelFamily.PERIODIC_1D,
    "gaussian": KernelFamily.GAUSSIAN_RBF,
    "gaussian_rbf": KernelFamily.GAUSSIAN_RBF,
    "rbf": KernelFamily.GAUSSIAN_RBF,
    "periodic_times_gaussian_time": KernelFamily.PERIODIC_TIMES_GAUSSIAN_TIME,
    "spacetime": KernelFamily.PERIODIC_TIMES_GAUSSIAN_TIME,
    "product_periodic": KernelFamily.PRODUCT_PERIODIC,
}


def parse_family(name: str | KernelFamily) -> KernelFamily:
    if isinstance(name, KernelFamily):
        return name
    try:
        return _FAMILY_ALIASES[name.lower()]
    except KeyError:
        raise KernelError(f"unknown kernel family {name!r}") from None


@dataclass(frozen=True)
class KernelSpec:
    """Immutable description of a scalar covariance kernel.

    ``lengthscales`` holds one value per factor group: for the periodic and
    Gaussian families either a single value (shared by all spatial axes) or
    one per axis; for ``PERIODIC_TIMES_GAUSSIAN_TIME`` the spatial value(s)
    followed by the time lengthscale.  A single periodic lengthscale ``l``
    and the ``sigma_1`` of the cosine form are the same number.
    """

    family: KernelFamily
    lengthscales: tuple[float, ...]
    dims: int = 1
    has_time: bool = False
    period: float = 1.0
    _factors: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        family = parse_family(self.family)
        object.__setattr__(self, "family", family)
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if self.dims < 1:
            raise KernelError("dims must be >= 1")
        if any(not np.isfinite(v) or v <= 0 for v in ls):
            raise KernelError(f"lengthscales must be strictly positive, got {ls}")
        if self.period <= 0:
            raise KernelError("period must be positive")

        d = self.dims
        if family is KernelFamily.PERIODIC_1D:
            if d != 1 or self.has_time:
                raise KernelError("PERIODIC_1D is a one-dimensional time-free kernel")
            factors = (("periodic", ls[0]),)
        elif family in (KernelFamily.GAUSSIAN_RBF, KernelFamily.PRODUCT_PERIODIC):
            if self.has_time:
                raise KernelError(f"{family.value} has no time factor")
            kind = "gaussian" if family is KernelFamily.GAUSSIAN_RBF else "periodic"
            factors = tuple((kind, v) for v in _spread(ls, d))
        else:
            if not self.has_time:
                raise KernelError("PERIODIC_TIMES_GAUSSIAN_TIME requires has_time=True")
            if len(ls) < 2:
                raise KernelError("space-time kernel needs spatial and time lengthscales")
            space = _spread(ls[:-1], d)
            factors = tuple(("periodic", v) for v in space) + (("gaussian", ls[-1]),)
        object.__setattr__(self, "_factors", factors)

    @property
    def point_dim(self) -> int:
        return self.dims + (1 if self.has_time else 0)

    @property
    def factors(self) -> tuple:
        return self._factors

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "lengthscales": list(self.lengthscales),
            "dims": self.dims,
            "has_time": self.has_time,
            "period": self.period,
        }


def _spread(ls: Sequence[float], d: int) -> tuple[float, ...]:
    if len(ls) == 1:
        return tuple(ls) * d
    if len(ls) != d:
        raise KernelError(f"expected 1 or {d} spatial lengthscales, got {len(ls)}")
    return tuple(ls)


class OpKind(str, Enum):
    IDENTITY = "id"
    DT = "dt"
    GRAD = "grad"
    LAPLACIAN = "lap"


@dataclass(frozen=True)
class DiffOp:
    kind: OpKind
    axis: int = 0

    def __repr__(self):
        if self.kind is OpKind.GRAD:
            return f"Grad({self.axis})"
        return {OpKind.IDENTITY: "Identity", OpKind.DT: "Dt", OpKind.LAPLACIAN: "Laplacian"}[self.kind]


IDENTITY = DiffOp(OpKind.IDENTITY)
DT = DiffOp(OpKind.DT)
LAPLACIAN = DiffOp(OpKind.LAPLACIAN)


def grad(axis: int) -> DiffOp:
    return DiffOp(OpKind.GRAD, axis)


def check_op(spec: KernelSpec, op: DiffOp) -> None:
    if op.kind is OpKind.DT and not spec.has_time:
        raise KernelError(f"Dt applied to time-free kernel {spec.family.value}")
    if op.kind is OpKind.GRAD and not 0 <= op.axis < spec.dims:
        raise KernelError(f"Grad axis {op.axis} out of range for d={spec.dims}", axis=op.axis)


def expand_op(spec: KernelSpec, op: DiffOp) -> list[tuple[float, tuple[int, ...]]]:
    """Write ``op`` as a list of (coefficient, multi-index over point axes)."""
    check_op(spec, op)
    n = spec.point_dim
    zero = [0] * n
    if op.kind is OpKind.IDENTITY:
        return [(1.0, tuple(zero))]
    if op.kind is OpKind.DT:
        idx = list(zero)
        idx[spec.dims] = 1
        return [(1.0, tuple(idx))]
    if op.kind is OpKind.GRAD:
        idx = list(zero)
        idx[op.axis] = 1
        return [(1.0, tuple(idx))]
    terms = []
    for a in range(spec.dims):
        idx = list(zero)
        idx[a] = 2
        terms.append((1.0, tuple(idx)))
    return terms


def _factor_derivatives(kind: str, ell: float, tau: np.ndarray, order: int, period: float) -> list[np.ndarray]:
    """Derivatives ``f^(0..order)`` of one factor at ``tau`` (Faa di Bruno on exp(g))."""
    if kind == "periodic":
        w = 2.0 * np.pi / period
        s, c = np.sin(w * tau), np.cos(w * tau)
        il2 = 1.0 / ell**2
        g = (c - 1.0) * il2
        g1 = -w * s * il2
        g2 = -(w**2) * c * il2
        g3 = (w**3) * s * il2
        g4 = (w**4) * c * il2
    else:
        il2 = 1.0 / ell**2
        g = -(tau**2) * il2
        g1 = -2.0 * tau * il2
        g2 = np.full_like(tau, -2.0 * il2)
        g3 = np.zeros_like(tau)
        g4 = g3
    f = np.exp(g)
    out = [f]
    if order >= 1:
        out.append(g1 * f)
    if order >= 2:
        out.append((g2 + g1**2) * f)
    if order >= 3:
        out.append((g3 + 3 * g1 * g2 + g1**3) * f)
    if order >= 4:
        out.append((g4 + 4 * g1 * g3 + 3 * g2**2 + 6 * g1**2 * g2 + g1**4) * f)
    return out


def _as_points(spec: KernelSpec, z) -> np.ndarray:
    arr = np.asarray(z, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if spec.point_dim > 1 or arr.size == 1 else arr.reshape(-1, 1)
    if arr.shape[1] != spec.point_dim:
        axis = min(arr.shape[1], spec.point_dim)
        raise KernelError(
            f"point has {arr.shape[1]} coordinates but kernel expects {spec.point_dim} "
            f"({spec.dims} spatial{' + time' if spec.has_time else ''}); mismatch at axis {axis}",
            axis=axis,
        )
    return arr


def op_block(spec: KernelSpec, opL: DiffOp, Z1, opR: DiffOp, Z2) -> np.ndarray:
    """Matrix ``[opL_z opR_z' k](Z1[i], Z2[j])`` for all point pairs."""
    Z1 = _as_points(spec, Z1)
    Z2 = _as_points(spec, Z2)
    left = expand_op(spec, opL)
    right = expand_op(spec, opR)
    tau = Z1[:, None, :] - Z2[None, :, :]
    n_ax = spec.point_dim
    max_ord = [0] * n_ax
    for _, a in left:
        for _, b in right:
            for ax in range(n_ax):
                max_ord[ax] = max(max_ord[ax], a[ax] + b[ax])
    tables = [
        _factor_derivatives(kind, ell, tau[..., ax], max_ord[ax], spec.period)
        for ax, (kind, ell) in enumerate(spec.factors)
    ]
    out = np.zeros(tau.shape[:2])
    for ca, a in left:
        for cb, b in right:
            term = np.full(tau.shape[:2], ca * cb * (-1.0) ** sum(b))
            for ax in range(n_ax):
                term = term * tables[ax][a[ax] + b[ax]]
            out += term
    return out


def eval_kernel(spec: KernelSpec, z, zp) -> float:
    """Scalar ``k(z, z')``."""
    return float(op_block(spec, IDENTITY, z, IDENTITY, zp)[0, 0])


def eval_kernel_op(spec: KernelSpec, opL: DiffOp, z, opR: DiffOp, zp) -> float:
    """Scalar ``opL`` (first argument) and ``opR`` (second argument) applied to ``k``."""
    return float(op_block(spec, opL, z, opR, zp)[0, 0])


@dataclass(frozen=True)
class MatrixKernelSpec:
    """Diagonal matrix-valued kernel ``K(z, z') = k(z, z') I_d``."""

    scalar: KernelSpec
    dims: int

    def __post_init__(self):
        if self.dims < 1:
            raise KernelError("output dimension must be >= 1")


def matrix_kernel_block(spec: MatrixKernelSpec, z, zp) -> np.ndarray:
    return eval_kernel(spec.scalar, z, zp) * np.eye(spec.dims)
