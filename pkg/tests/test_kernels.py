import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gppi.errors import KernelError
from gppi.kernels import (
    DT, IDENTITY, LAPLACIAN, KernelSpec, MatrixKernelSpec, eval_kernel, eval_kernel_op, grad,
    matrix_kernel_block, op_block,
)
from oracles import central_difference, gaussian_factor, periodic_factor

P1 = KernelSpec("periodic1d", (1.0,))
ST = KernelSpec("spacetime", (0.7, 0.9), has_time=True)
P2 = KernelSpec("product_periodic", (0.4, 0.6), dims=2)
G2 = KernelSpec("gaussian_rbf", (0.6,), dims=2)


def test_periodic_coincident_is_one():
    assert eval_kernel(P1, 0.3, 0.3) == 1.0


def test_periodic_half_period():
    assert eval_kernel(P1, 0.75, 0.25) == pytest.approx(np.exp(-2.0), abs=1e-12)
    assert eval_kernel(P1, 0.75, 0.25) == pytest.approx(0.1353353, abs=1e-7)


def test_gaussian_at_lengthscale():
    k = KernelSpec("gaussian_rbf", (0.6,))
    assert eval_kernel(k, 0.1, 0.7) == pytest.approx(0.3678794, abs=1e-7)


def test_identity_pair_is_eval_kernel():
    z, zp = np.array([0.1, 0.3]), np.array([0.8, -0.2])
    assert eval_kernel_op(P2, IDENTITY, z, IDENTITY, zp) == eval_kernel(P2, z, zp)


def test_grad_identity_vanishes_at_coincidence():
    assert eval_kernel_op(P1, grad(0), 0.4, IDENTITY, 0.4) == 0.0


def test_grad_grad_at_coincidence():
    # oracle: central differences of the closed-form factor, step 1e-5
    h = 1e-5
    f = lambda a, b: periodic_factor(a - b, 1.0)
    fd = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4 * h * h)
    val = eval_kernel_op(P1, grad(0), 0.2, grad(0), 0.2)
    assert fd == pytest.approx(4 * np.pi**2, rel=1e-5)
    assert val == pytest.approx(4 * np.pi**2, rel=1e-12)
    assert val == pytest.approx(39.4784176, abs=1e-7)


def test_closed_form_matches_independent_factors():
    rng = np.random.default_rng(1)
    z, zp = rng.uniform(-1, 1, (2, 2))
    want = periodic_factor(z[0] - zp[0], 0.7) * gaussian_factor(z[1] - zp[1], 0.9)
    assert eval_kernel(ST, z, zp) == pytest.approx(want, rel=1e-14)
    want = periodic_factor(z[0] - zp[0], 0.4) * periodic_factor(z[1] - zp[1], 0.6)
    assert eval_kernel(P2, z, zp) == pytest.approx(want, rel=1e-14)


def test_dimension_mismatch_names_axis():
    with pytest.raises(KernelError) as info:
        eval_kernel(P2, [0.1, 0.2, 0.3], [0.0, 0.0])
    assert info.value.axis is not None


def test_dt_on_time_free_kernel():
    with pytest.raises(KernelError):
        eval_kernel_op(P1, DT, 0.1, IDENTITY, 0.2)


def test_grad_axis_out_of_range():
    with pytest.raises(KernelError):
        eval_kernel_op(P1, grad(1), 0.1, IDENTITY, 0.2)


def test_nonpositive_lengthscale():
    with pytest.raises(KernelError):
        KernelSpec("periodic1d", (0.0,))


def test_matrix_kernel_block():
    mk = MatrixKernelSpec(P2, 2)
    z = np.array([0.1, 0.2])
    assert np.array_equal(matrix_kernel_block(mk, z, z), np.eye(2))
    zp = np.array([0.4, -0.3])
    B = matrix_kernel_block(mk, z, zp)
    assert B[0, 1] == 0.0 and B[1, 0] == 0.0
    m1 = MatrixKernelSpec(P1, 1)
    assert matrix_kernel_block(m1, 0.1, 0.5)[0, 0] == eval_kernel(P1, 0.1, 0.5)


# finite-difference consistency: each entry is one central difference away from a lower-order entry
# (left op, right op) -> (lower left op, lower right op, side, axes to sum over)
def _chain(spec):
    d = spec.dims
    t = d if spec.has_time else None
    ch = []
    for a in range(d):
        ch.append(((grad(a), IDENTITY), (IDENTITY, IDENTITY), "L", [a]))
        ch.append(((IDENTITY, grad(a)), (IDENTITY, IDENTITY), "R", [a]))
        for b in range(d):
            ch.append(((grad(a), grad(b)), (grad(a), IDENTITY), "R", [b]))
    ch.append(((LAPLACIAN, IDENTITY), None, "L", list(range(d))))
    for b in range(d):
        ch.append(((LAPLACIAN, grad(b)), (LAPLACIAN, IDENTITY), "R", [b]))
    ch.append(((LAPLACIAN, LAPLACIAN), None, "R", list(range(d))))
    if t is not None:
        ch.append(((DT, IDENTITY), (IDENTITY, IDENTITY), "L", [t]))
        ch.append(((DT, DT), (DT, IDENTITY), "R", [t]))
        ch.append(((LAPLACIAN, DT), (LAPLACIAN, IDENTITY), "R", [t]))
        for a in range(d):
            ch.append(((DT, grad(a)), (DT, IDENTITY), "R", [a]))
    return ch


def _entry(spec, ops, z, zp):
    return eval_kernel_op(spec, ops[0], z, ops[1], zp)


def _fd_entry(spec, target, lower, side, axes, z, zp):
    total = 0.0
    for ax in axes:
        if lower is None:  # Laplacian built from per-axis gradient entries
            low = (grad(ax), IDENTITY) if side == "L" else (LAPLACIAN, grad(ax))
        else:
            low = lower
        if side == "L":
            total += central_difference(lambda x: _entry(spec, low, x, zp), z, ax)
        else:
            total += central_difference(lambda x: _entry(spec, low, z, x), zp, ax)
    return total


@pytest.mark.parametrize("spec", [P1, ST, P2, G2, KernelSpec("spacetime", (0.5, 0.4), dims=2, has_time=True)],
                         ids=["periodic1d", "spacetime", "product2d", "gauss2d", "spacetime2d"])
def test_derivatives_vs_finite_differences(spec):
    rng = np.random.default_rng(7)
    pairs = 100
    worst = 0.0
    for _ in range(pairs):
        z = rng.uniform(-0.5, 0.5, spec.point_dim)
        zp = rng.uniform(-0.5, 0.5, spec.point_dim)
        for target, lower, side, axes in _chain(spec):
            val = _entry(spec, target, z, zp)
            fd = _fd_entry(spec, target, lower, side, axes, z, zp)
            scale = max(abs(val), 1e-3 * abs(_entry(spec, (LAPLACIAN, LAPLACIAN), z, z)), 1.0)
            worst = max(worst, abs(val - fd) / scale)
    assert worst < 1e-5


_pt = st.floats(-2.0, 2.0, allow_nan=False)


@given(st.tuples(_pt, _pt, _pt, _pt))
def test_symmetry_all_op_pairs(vals):
    z, zp = np.array(vals[:2]), np.array(vals[2:])
    ops = [IDENTITY, grad(0), grad(1), LAPLACIAN]
    for a in ops:
        for b in ops:
            x = eval_kernel_op(P2, a, z, b, zp)
            y = eval_kernel_op(P2, b, zp, a, z)
            assert abs(x - y) <= 1e-12 * max(1.0, abs(x))


@given(st.tuples(_pt, _pt, _pt), st.integers(-3, 3))
def test_periodicity(vals, shift):
    z, zp = np.array(vals[:2]), np.array([vals[2], 0.1])
    for a, b in [(IDENTITY, IDENTITY), (grad(0), DT), (LAPLACIAN, LAPLACIAN), (DT, grad(0))]:
        base = eval_kernel_op(ST, a, z, b, zp)
        moved = eval_kernel_op(ST, a, z + np.array([shift, 0.0]), b, zp)
        assert abs(base - moved) <= 1e-12 * max(1.0, abs(base)) * (1 + abs(shift))


@given(st.tuples(_pt, _pt))
def test_unit_diagonal_and_bounded(vals):
    z = np.array(vals)
    assert eval_kernel(G2, z, z) == 1.0
    assert 0.0 < eval_kernel(P2, z, z[::-1]) <= 1.0


def test_spacetime_separability():
    rng = np.random.default_rng(3)
    Z1, Z2 = rng.uniform(-0.5, 0.5, (6, 2)), rng.uniform(0, 1, (5, 2))
    sp_k = KernelSpec("periodic1d", (0.7,))
    t_k = KernelSpec("gaussian_rbf", (0.9,))
    for a in (IDENTITY, grad(0), LAPLACIAN):
        for b in (IDENTITY, grad(0), LAPLACIAN):
            full = op_block(ST, a, Z1, b, Z2)
            sep = op_block(sp_k, a, Z1[:, :1], b, Z2[:, :1]) * op_block(t_k, IDENTITY, Z1[:, 1:], IDENTITY, Z2[:, 1:])
            assert np.allclose(full, sep, rtol=1e-12, atol=1e-12 * np.abs(full).max())
