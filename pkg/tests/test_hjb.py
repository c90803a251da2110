import numpy as np
import pytest

from gppi.gp_core import Observations, eliminate_constraints
from gppi.hjb import HJBConfig, HJBProblem, evaluate_policy_hjb, gppi_hjb, hjb_reference
from gppi.kernels import KernelSpec
from gppi.policy import HamiltonianSpec
from gppi.problem import RunControls
from gppi.reference import GridField, l2_error

ZERO = lambda x: np.zeros(len(x))
V_TRUE = lambda x: 1.5 * x[:, 0] ** 2
U_T = lambda x: 0.5 + x[:, 0] ** 2
LQR = HamiltonianSpec("lqr_power", A=0.1, B=0.5, R_cost=0.4**1.5)


def small(**kw):
    base = dict(nx=8, nt=6, sigma=0.3, ham=LQR, V=V_TRUE, U_T=U_T)
    base.update(kw)
    return HJBConfig(**base)


def degenerate(time_scale=1.0):
    kern = KernelSpec("periodic_times_gaussian_time", (0.8, time_scale), has_time=True)
    return HJBConfig(nx=8, nt=6, sigma=0.3, V=ZERO, U_T=lambda x: np.full(len(x), 2.5), kernel_u=kern)


@pytest.mark.xfail(strict=True, reason="constants are not in the Gaussian time factor's RKHS; "
                   "the minimum-norm latent decays away from the terminal slice")
def test_degenerate_constant_solution():
    cfg = degenerate()
    z, v, models = evaluate_policy_hjb(cfg, 0.0)
    prob = HJBProblem(cfg)
    lay = prob.lay
    assert v is None
    assert np.abs(z[lay["z1"]] - 2.5).max() < 1e-6
    for seg in ("z2", "z3_0", "z4"):
        assert np.abs(z[lay[seg]]).max() < 1e-6
    assert models["u"]([[0.1, 0.5]])[0] == pytest.approx(2.5, abs=1e-6)


def test_degenerate_approaches_constant_with_time_scale():
    # the deviation from c shrinks like the inverse square of the time lengthscale
    devs = []
    for ts in (8.0, 16.0, 32.0):
        cfg = degenerate(ts)
        z, _, _ = evaluate_policy_hjb(cfg, 0.0)
        lay = HJBProblem(cfg).lay
        assert np.abs(z[lay["z1"]][-8:] - 2.5).max() < 1e-12
        assert np.abs(z[lay["z3_0"]]).max() < 1e-6
        devs.append(np.abs(z[lay["z1"]] - 2.5).max())
    assert devs[0] > devs[1] > devs[2]
    assert devs[1] / devs[2] > 3.5


def test_degenerate_converges_in_one_iteration():
    rep = gppi_hjb(degenerate())
    assert rep.converged and rep.iterations == 1


def test_inverse_dominant_penalty_matches_data():
    obs_v = Observations(np.array([[-0.3], [0.1], [0.35]]), [0.2, -0.1, 0.4], 1e6)
    cfg = small(alpha_v=0.5, alpha_vo=1e6, obs_v=obs_v)
    z, v, _ = evaluate_policy_hjb(cfg, 0.0)
    prob = HJBProblem(cfg)
    v2 = v[prob.lay["v2"].start - prob.lay["v1"].start:]
    assert np.abs(v2 - obs_v.values).max() < 1e-5


def test_constraints_and_terminal_exact_every_iteration():
    cfg = small()
    prob = HJBProblem(cfg)
    state = prob.initial_state(evaluate=False)
    obj = prob.objectives["u"]
    Ut = U_T(prob.Xt[:, :1])
    for _ in range(4):
        rows = prob.rows("u", state)
        sol = prob.solve_block("u", state)
        assert np.abs(rows.residual(sol.x)).max() < 1e-8 * (1 + np.abs(sol.x).max())
        assert np.abs(sol.x[prob.lay.index("z1")[prob.Mi:]] - Ut).max() < 1e-8
        state.x["u"] = sol.x
        state.q = prob.improve(state)
        # monotone residual: re-solving under the new policy is at least as good as re-expanding the old iterate
        elim = eliminate_constraints(obj.n, prob.rows("u", state))
        projected = elim.expand(sol.x[elim.free])
        new = prob.solve_block("u", state)
        assert obj.value(new.x) <= obj.value(projected) + 1e-10


def test_policy_is_closed_form_of_latent_gradient():
    cfg = small()
    prob = HJBProblem(cfg)
    st = prob.initial_state()
    p = st.x["u"][prob.lay["z3_0"]]
    expected = -(27 / 64) * (p * 0.5) ** 3 / (0.4**1.5) ** 2
    assert np.allclose(prob.improve(st)[:, 0], expected, rtol=1e-12)


def test_forward_inverse_consistency():
    fwd = small()
    zf, _, mf = evaluate_policy_hjb(fwd, 0.0)
    xs = np.linspace(-0.5, 0.5, 8, endpoint=False)[:, None]
    obs_v = Observations(xs, V_TRUE(xs), 1e10)
    inv = small(alpha_v=0.5, alpha_vo=1e8, obs_v=obs_v)
    zi, v, mi = evaluate_policy_hjb(inv, 0.0)
    g = fwd.grid()
    err = l2_error(GridField(g, mf["u"](g.points)), GridField(g, mi["u"](g.points)))
    assert err < 1e-4


def test_gppi_small_against_fd_reference():
    # coarser grids under-resolve the cubic feedback and the iteration oscillates
    cfg = small(nx=22, nt=22, controls=RunControls(max_iter=30, tol=1e-6))
    ref = hjb_reference(cfg, refine=8)
    cfg.reference = ref
    rep = gppi_hjb(cfg)
    assert rep.converged
    assert rep.history[-1].l2_error_u < 5e-3
    assert rep.extra["terminal_residual"] < 1e-8
    assert set(rep.fields) == {"u", "V"}


def test_sigma_callable_accepted():
    cfg = small(sigma=lambda P: 0.3 + 0.05 * np.cos(2 * np.pi * P[:, 0]))
    z, _, _ = evaluate_policy_hjb(cfg, 0.0)
    assert np.all(np.isfinite(z))


def test_config_validation():
    with pytest.raises(ValueError):
        HJBConfig(T=0.0, V=V_TRUE, U_T=U_T)
    with pytest.raises(ValueError):
        HJBConfig(V=V_TRUE)
    with pytest.raises(ValueError):
        HJBConfig(U_T=U_T)
    with pytest.raises(ValueError):
        HJBConfig(V=V_TRUE, U_T=U_T, kernel_u=KernelSpec("periodic1d", (0.5,)))


def test_latent_layout_lengths():
    obs_u = Observations(np.array([[0.1, 0.5], [0.2, 0.3]]), [0.0, 0.0], 1.0)
    obs_v = Observations(np.array([[0.1]]), [0.0], 1.0)
    cfg = small(alpha_uo=1.0, obs_u=obs_u, alpha_v=0.5, alpha_vo=1.0, obs_v=obs_v)
    prob = HJBProblem(cfg)
    M, Mi, d = prob.M, prob.Mi, 1
    z_len = M + Mi + d * Mi + Mi + obs_u.size
    assert prob.lay["v1"].start == z_len
    assert prob.lay.n - z_len == Mi + obs_v.size
