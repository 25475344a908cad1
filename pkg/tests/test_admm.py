import numpy as np
import pytest

from veronica import policy_net as pn
from veronica.admm import (
    AdmmSettings, AdmmState, dual_update, pl_objective, pl_point_controls, policy_inputs,
    policy_update, primal_pl_update, primal_to_update, run_admm,
)
from veronica.advreg import PerturbationConfig, TrainSettings, train_policy
from veronica.costs import QuadraticCostParams, default_cost_params
from veronica.ddp import solve_ddp
from veronica.envs import CartPole, LinearModel


def golden_section(f, lo, hi, tol=1e-12):
    g = (np.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    while b - a > tol:
        if f(c) < f(d):
            b, d = d, c
            c = b - g * (b - a)
        else:
            a, c = c, d
            d = a + g * (b - a)
    return 0.5 * (a + b)


def cartpole_state(N=3, T=20, rho_x=10.0, rho_u=1.0, seed=0):
    rng = np.random.default_rng(seed)
    model = CartPole()
    x0 = np.column_stack([rng.uniform(-0.1, 0.1, N), np.zeros(N), rng.uniform(-0.3, 0.3, N), np.zeros(N)])
    goals = np.zeros((N, 1))
    return model, default_cost_params(model), AdmmState.initial(x0, goals, model, T, rho_x, rho_u)


def test_first_iteration_is_plain_ddp_and_seeds_pl_copies():
    model, cp, st = cartpole_state()
    primal_to_update(st, model, cp)
    for i in range(st.N):
        ref = solve_ddp(st.x0[i], model, cp, T=st.T)
        assert np.array_equal(st.U_TO[i], ref.trajectory.controls)
    assert np.array_equal(st.X_PL, st.X_TO[:, :-1]) and np.array_equal(st.U_PL, st.U_TO)


def test_zero_penalty_later_iteration_equals_standalone_ddp():
    model, cp, st = cartpole_state(rho_x=0.0, rho_u=0.0)
    rng = np.random.default_rng(1)
    st.iteration = 3
    st.X_PL = rng.normal(size=st.X_PL.shape)
    st.lam_X = rng.normal(size=st.lam_X.shape)
    primal_to_update(st, model, cp, warm_start=False)
    for i in range(st.N):
        ref = solve_ddp(st.x0[i], model, cp, T=st.T)
        assert np.array_equal(st.U_TO[i], ref.trajectory.controls)


def test_resolve_at_consensus_changes_nothing():
    model, cp, st = cartpole_state()
    primal_to_update(st, model, cp)
    before = st.U_TO.copy()
    st.iteration = 1
    primal_to_update(st, model, cp)
    assert np.max(np.abs(st.U_TO - before)) <= 1e-6


def test_large_penalty_tracks_pl_controls_on_linear_model():
    model = LinearModel(np.eye(1), np.eye(1))
    cp = QuadraticCostParams(np.eye(1), np.eye(1), np.zeros(1), np.eye(1))
    T = 10
    st = AdmmState.initial(np.array([[0.5]]), np.zeros((1, 1)), model, T, 0.0, 1e6)
    rng = np.random.default_rng(2)
    st.iteration = 1
    st.U_PL = rng.normal(size=st.U_PL.shape)
    st.lam_U = 0.1 * rng.normal(size=st.lam_U.shape)
    primal_to_update(st, model, cp, warm_start=False)
    assert np.max(np.abs(st.U_TO - (st.U_PL - st.lam_U))) <= 1e-3


def test_policy_update_zero_epochs_keeps_params():
    model, cp, st = cartpole_state()
    primal_to_update(st, model, cp)
    W = pn.init((5, 8, 1), 0)
    res = policy_update(st, W, PerturbationConfig(), "sar", TrainSettings(epochs=0))
    assert np.array_equal(res.params.flat, W.flat)


def test_policy_update_does_not_increase_cloning_loss():
    model, cp, st = cartpole_state()
    primal_to_update(st, model, cp)
    W = pn.init((5, 16, 1), 0)
    res = policy_update(st, W, PerturbationConfig(eta_W=1e-2), "sar", TrainSettings(epochs=20, batch_size=16),
                        np.random.default_rng(0))
    assert res.final_bc <= res.initial_bc


def _consistent_state(W, N=2, T=5, d_x=4, seed=3, rho_x=10.0, rho_u=1.0):
    rng = np.random.default_rng(seed)
    model = CartPole()
    st = AdmmState.initial(rng.normal(size=(N, d_x)), np.zeros((N, 1)), model, T, rho_x, rho_u)
    st.X_TO = rng.normal(size=st.X_TO.shape)
    st.U_TO = pn.forward(W, policy_inputs(st.X_TO[:, :-1], st.goals)).reshape(N, T, 1)
    return st


def test_pl_update_fixed_point_when_policy_reproduces_to():
    W = pn.init((5, 8, 1), 4)
    st = _consistent_state(W)
    primal_pl_update(st, W)
    np.testing.assert_allclose(st.X_PL, st.X_TO[:, :-1], atol=1e-12)
    np.testing.assert_allclose(st.U_PL, st.U_TO, atol=1e-12)


def test_pl_controls_follow_to_plus_dual_for_large_rho_u():
    W = pn.init((5, 8, 1), 5)
    st = _consistent_state(W, rho_u=1e7)
    rng = np.random.default_rng(6)
    st.U_TO = st.U_TO + rng.normal(size=st.U_TO.shape)
    st.lam_U = 0.1 * rng.normal(size=st.lam_U.shape)
    primal_pl_update(st, W)
    assert np.max(np.abs(st.U_PL - (st.U_TO + st.lam_U))) <= 1e-3


def test_closed_form_control_matches_golden_section():
    rng = np.random.default_rng(7)
    N, rho_u = 4, 0.8
    for _ in range(5):
        pi, u_to, lam = rng.normal(size=3)
        f = lambda u: (pi - u) ** 2 / N + 0.5 * rho_u * (u_to - u + lam) ** 2
        ref = golden_section(f, -10, 10)
        assert abs(pl_point_controls(pi, u_to, lam, rho_u, N) - ref) <= 1e-8


def test_pl_update_never_increases_objective():
    W = pn.init((5, 8, 1), 8)
    st = _consistent_state(W)
    rng = np.random.default_rng(9)
    st.U_TO = st.U_TO + rng.normal(size=st.U_TO.shape)
    st.X_PL = st.X_TO[:, :-1] + 0.1 * rng.normal(size=st.X_PL.shape)
    st.U_PL = rng.normal(size=st.U_PL.shape)
    before = pl_objective(st.X_PL, st.U_PL, W, st)
    primal_pl_update(st, W)
    assert np.all(pl_objective(st.X_PL, st.U_PL, W, st) <= before + 1e-15)


def test_dual_update_rules():
    model, cp, st = cartpole_state()
    rng = np.random.default_rng(10)
    st.X_TO = rng.normal(size=st.X_TO.shape)
    st.U_TO = rng.normal(size=st.U_TO.shape)
    st.X_PL, st.U_PL = st.X_TO[:, :-1].copy(), st.U_TO.copy()
    lam_x, lam_u = rng.normal(size=st.lam_X.shape), rng.normal(size=st.lam_U.shape)
    st.lam_X, st.lam_U = lam_x.copy(), lam_u.copy()
    dual_update(st)
    assert np.array_equal(st.lam_X, lam_x) and np.array_equal(st.lam_U, lam_u)

    st.lam_X, st.lam_U = np.zeros_like(lam_x), np.zeros_like(lam_u)
    st.X_PL = rng.normal(size=st.X_PL.shape)
    r = st.X_TO[:, :-1] - st.X_PL
    dual_update(st)
    assert np.array_equal(st.lam_X, r)
    dual_update(st)
    assert np.array_equal(st.lam_X, r + r)


def test_single_iteration_history():
    model, cp, st = cartpole_state()
    W0 = pn.init((5, 8, 1), 0)
    res = run_admm(st.x0, st.goals, model, cp, 15, W0, AdmmSettings(max_iterations=1),
                   train_settings=TrainSettings(epochs=2, batch_size=16))
    assert len(res.history) == 1 and res.best_iteration == 1
    assert set(res.history[0]) == {"iteration", "q_bc", "q_bc_to", "primal_residual_x", "primal_residual_u",
                                   "ddp_failures"}


def test_zero_penalty_single_iteration_is_to_then_cloning():
    model, cp, st = cartpole_state()
    W0 = pn.init((5, 8, 1), 0)
    ts = TrainSettings(epochs=3, batch_size=16)
    cfg = PerturbationConfig()
    res = run_admm(st.x0, st.goals, model, cp, 15, W0, AdmmSettings(max_iterations=1, rho_x=0.0, rho_u=0.0),
                   cfg, "sar", ts, seed=4)
    X = np.stack([solve_ddp(st.x0[i], model, cp, T=15).trajectory.states for i in range(st.N)])
    U = np.stack([solve_ddp(st.x0[i], model, cp, T=15).trajectory.controls for i in range(st.N)])
    ref = train_policy((policy_inputs(X[:, :-1], st.goals), U.reshape(-1, 1)), W0, cfg, "sar", ts,
                       np.random.default_rng([4, 1]), n_traj=st.N)
    assert np.array_equal(res.params.flat, ref.params.flat)


def test_run_is_deterministic():
    model, cp, st = cartpole_state(N=2)
    W0 = pn.init((5, 8, 1), 0)
    kw = dict(settings=AdmmSettings(max_iterations=2, patience=5), train_settings=TrainSettings(epochs=2, batch_size=8),
              seed=11)
    a = run_admm(st.x0, st.goals, model, cp, 10, W0, **kw)
    b = run_admm(st.x0, st.goals, model, cp, 10, W0, **kw)
    assert a.history == b.history
    assert np.array_equal(a.params.flat, b.params.flat)


def test_invalid_settings():
    with pytest.raises(Exception):
        AdmmSettings(max_iterations=0)
    with pytest.raises(Exception):
        AdmmSettings(rho_x=-1.0)
