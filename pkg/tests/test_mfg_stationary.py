import numpy as np
import pytest

from gppi.gp_core import Observations, solve_latent_qp, solve_latent_qp_kkt
from gppi.kernels import LAPLACIAN, KernelSpec, grad
from gppi.mfg_stationary import (
    PowerCoupling, StationaryConfig, StationaryMFG, gppi_stationary, solve_fp_stationary, solve_hjb_stationary,
)
from gppi.policy import div_policy, eval_policy
from gppi.problem import RunControls
from gppi.reference import Grid, GridField, classical_pi_stationary, l2_error

ZERO = lambda p: np.zeros(len(p))
FORWARD_V = lambda p: 2 * (np.sin(np.pi * p[:, 0]) + np.cos(5 * np.pi * p[:, 0]))
SMOOTH_Q = lambda x: 0.5 * np.sin(2 * np.pi * x) + 0.3 * np.cos(4 * np.pi * x)


def small(**kw):
    base = dict(n=30, nu=0.5, V=FORWARD_V, F=PowerCoupling(4.0))
    base.update(kw)
    return StationaryConfig(**base)


# ---- FP block ----

def test_fp_zero_policy_uniform_density():
    prob = StationaryMFG(small())
    x, model = solve_fp_stationary(prob, None)
    lay = prob.lay_m
    assert np.abs(x[lay["r1"]] - 1).max() < 1e-6
    assert np.abs(x[lay["r2_0"]]).max() < 1e-6
    assert np.abs(x[lay["r3"]]).max() < 1e-6
    assert np.abs(model(np.array([[0.123], [0.77]])) - 1).max() < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fp_mass_conservation_random_policy(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=2)
    prob = StationaryMFG(small())
    x0 = prob.X[:, 0]
    q = a * np.sin(2 * np.pi * x0 + b) + 0.2 * b * np.cos(4 * np.pi * x0)
    x, _ = solve_fp_stationary(prob, q)
    assert abs(x[prob.lay_m["r1"]].mean() - 1) < 1e-10
    st = prob.initial_state()
    st.q = q[:, None]
    rows = prob.rows("m", st)
    assert np.abs(rows.residual(x)).max() < 1e-8 * (1 + np.abs(x).max())


def test_fp_residual_off_nodes_after_first_update():
    cfg = StationaryConfig(n=100, nu=0.5, V=FORWARD_V, F=PowerCoupling(4.0))
    prob = StationaryMFG(cfg)
    st = prob.initial_state()
    st.x["m"] = prob.solve_block("m", st).x
    st.x["u"] = prob.solve_block("u", st).x
    st.q = prob.improve(st)
    st.x["m"] = prob.solve_block("m", st).x
    models = prob.models(st)
    m, Q = models["m"], models["Q"]
    P = np.random.default_rng(3).uniform(0, 1, (200, 1))
    # -nu Lap m - div(m Q) = -nu Lap m - grad m . Q - m div Q
    res = (-cfg.nu * m(P, LAPLACIAN) - m(P, grad(0)) * eval_policy(Q, P)[:, 0] - m(P) * div_policy(Q, P))
    assert np.abs(res).max() < 1e-2


# ---- HJB block ----

def test_hjb_constant_density_lambda_one():
    # defaults (n = 100, l = 0.2); the lambda prior shrinks lambda towards 0 on coarse node sets
    cfg = StationaryConfig(V=ZERO)
    z, lam, v, models = solve_hjb_stationary(cfg, None, lambda P: np.ones(len(P)))
    assert v is None
    assert abs(lam - 1) < 1e-3
    assert np.abs(z).max() < 1e-3
    assert np.abs(models["u"](np.array([[0.3]]))).max() < 1e-3


def test_hjb_zero_mean_row_exact():
    prob = StationaryMFG(small())
    q = SMOOTH_Q(prob.X[:, 0])
    m = 1 + 0.3 * np.cos(2 * np.pi * prob.X[:, 0])
    z, lam, _, _ = solve_hjb_stationary(prob, q, m)
    assert abs(z[prob.lay_u["z1"]].sum()) < 1e-10


def test_kkt_and_elimination_agree_on_lambda():
    prob = StationaryMFG(small(n=24))
    st = prob.initial_state()
    st.q = SMOOTH_Q(prob.X[:, :1])
    st.x["m"] = prob.solve_block("m", st).x
    obj, rows = prob.objectives["u"], prob.rows("u", st)
    x, _, _ = solve_latent_qp(obj, rows)
    xk, _ = solve_latent_qp_kkt(obj, rows)
    i = prob.lay_u["lam"]
    assert abs(x[i][0] - xk[i][0]) < 1e-9


# ---- full loop ----

def test_trivial_fixed_point_in_one_iteration():
    rep = gppi_stationary(small(V=ZERO, F=PowerCoupling(4.0, 0.0)))
    assert rep.converged and rep.iterations == 1
    assert abs(rep.lam) < 1e-9
    assert np.abs(rep.fields["m"].values - 1).max() < 1e-6
    assert np.abs(rep.fields["u"].values).max() < 1e-6


def test_mass_and_mean_every_iteration():
    prob = StationaryMFG(small())
    st = prob.initial_state()
    for _ in range(5):
        for blk in prob.blocks:
            st.x[blk] = prob.solve_block(blk, st).x
        assert abs(st.x["m"][prob.lay_m["r1"]].mean() - 1) < 1e-10
        assert abs(st.x["u"][prob.lay_u["z1"]].sum()) < 1e-10
        st.q = prob.improve(st)


def test_inverse_without_data_is_forward_bit_for_bit():
    ctl = RunControls(max_iter=4)
    fwd = small(controls=ctl)
    pts = np.array([[0.1], [0.6]])
    inv = small(controls=ctl, obs_m=Observations(pts, [1.0, 1.1], 1.0), alpha_mo=0.0,
                obs_v=Observations(pts, [0.0, 0.2], 1.0), alpha_vo=0.0)
    pf, pi = StationaryMFG(fwd), StationaryMFG(inv)
    assert pf.lay_m.n == pi.lay_m.n and pf.lay_u.n == pi.lay_u.n
    rf, ri = gppi_stationary(fwd), gppi_stationary(inv)
    assert rf.lam == ri.lam
    assert np.array_equal(rf.state.x["m"], ri.state.x["m"])
    assert np.array_equal(rf.state.q, ri.state.q)


def test_forward_small_close_to_fd():
    cfg = small(n=50, controls=RunControls(max_iter=60, tol=1e-8))
    ref = classical_pi_stationary(cfg.grid(), cfg.nu, FORWARD_V, cfg.F)
    rep = gppi_stationary(cfg)
    assert rep.converged
    assert abs(rep.lam - ref.lam) / ref.lam < 0.02
    assert l2_error(rep.fields["m"], ref.m) < 0.05
    assert rep.extra["mean_m"] == pytest.approx(1.0, abs=1e-12)


def test_inverse_recovers_cost():
    # dense noiseless density data and a few cost values; recovered V within 0.1 in L2
    n = 40
    V = lambda p: 0.5 * (np.sin(2 * np.pi * p[:, 0]) + np.cos(4 * np.pi * p[:, 0]))
    g = Grid.periodic_box(n)
    ref = classical_pi_stationary(g, 0.3, V, PowerCoupling(3.0))
    rng = np.random.default_rng(4)
    idx = rng.choice(n, 12, replace=False)
    vp = rng.uniform(0, 1, (10, 1))
    kern = KernelSpec("periodic1d", (0.5,))
    cfg = StationaryConfig(n=n, nu=0.3, F=PowerCoupling(3.0), V=V, alpha_mo=1e6, alpha_v=0.5, alpha_vo=1e6,
                           obs_m=Observations(g.points[idx], ref.m.values[idx], 1e6),
                           obs_v=Observations(vp, V(vp), 1e6), kernel_m=kern, kernel_u=kern, kernel_v=kern,
                           kernel_q=kern, controls=RunControls(max_iter=60, tol=1e-7))
    rep = gppi_stationary(cfg)
    assert rep.converged
    assert l2_error(rep.fields["V"], GridField(g, V(g.points))) < 0.1


def test_config_validation():
    with pytest.raises(ValueError):
        StationaryConfig(nu=0.0, V=ZERO)
    with pytest.raises(ValueError):
        StationaryConfig()
    with pytest.raises(ValueError):
        StationaryConfig(V=ZERO, alpha_lambda=0.0)
    with pytest.raises(ValueError):
        StationaryConfig(V=ZERO, alpha_mo=-1.0)
