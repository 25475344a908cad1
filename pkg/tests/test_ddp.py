import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from veronica.costs import AdmmResidualTerms, QuadraticCostParams, default_cost_params
from veronica.ddp import (
    DdpSettings, Trajectory, backward_pass, forward_pass, riccati_lqr, riccati_value_matrix,
    rollout_controls, solve_ddp, trajectory_cost,
)
from veronica.envs import CartPole, LinearModel


def random_lqr(rng, d_x=None, d_u=None):
    d_x = d_x or int(rng.integers(1, 5))
    d_u = d_u or int(rng.integers(1, d_x + 1))
    A = np.eye(d_x) + 0.1 * rng.normal(size=(d_x, d_x))
    B = rng.normal(size=(d_x, d_u))
    G = rng.normal(size=(d_x, d_x))
    Q = G @ G.T / d_x + 0.1 * np.eye(d_x)
    H = rng.normal(size=(d_u, d_u))
    R = H @ H.T / d_u + 0.1 * np.eye(d_u)
    return A, B, Q, R, Q.copy(), rng.normal(size=d_x)


def _ddp_lqr(A, B, Q, R, Q_f, x0, T):
    """Riccati convention is sum x'Qx + u'Ru; DDP costs are the same quadratic forms."""
    model = LinearModel(A, B)
    cp = QuadraticCostParams(Q, R, np.zeros(A.shape[0]), Q_f)
    return solve_ddp(x0, model, cp, T=T), model, cp


def test_riccati_one_step_closed_form():
    traj, _ = riccati_lqr(1.0, 1.0, 1.0, 1.0, 1.0, 1, np.array([1.0]))
    assert np.isclose(traj.controls[0, 0], -0.5, atol=1e-15)


def test_riccati_zero_state_cost_gives_zero_controls():
    traj, _ = riccati_lqr(np.eye(2), np.ones((2, 1)), np.zeros((2, 2)), np.eye(1), np.zeros((2, 2)), 5,
                          np.array([1.0, -2.0]))
    assert np.all(traj.controls == 0)


def test_riccati_value_matches_brute_force_grid():
    # A=0, scalar, two steps: cost = x0^2 + u0^2 + x1^2 + u1^2 + x2^2 with x1=u0, x2=u1
    A, B, Q, R, Qf, x0 = 0.0, 1.0, 1.0, 1.0, 1.0, 1.3
    P0 = riccati_value_matrix(A, B, Q, R, Qf, 2)[0, 0]
    grid = np.linspace(-2, 2, 4001)
    u0, u1 = np.meshgrid(grid, grid, indexing="ij")
    x1 = A * x0 + B * u0
    x2 = A * x1 + B * u1
    brute = (Q * x0**2 + R * u0**2 + Q * x1**2 + R * u1**2 + Qf * x2**2).min()
    assert abs(P0 * x0**2 - brute) < 1e-5
    traj, _ = riccati_lqr(A, B, Q, R, Qf, 2, np.array([x0]))
    assert traj.controls[0, 0] == 0.0 and traj.controls[1, 0] == 0.0


def test_backward_pass_one_step_scalar():
    model = LinearModel(np.eye(1), np.eye(1))
    cp = QuadraticCostParams(np.zeros((1, 1)), np.eye(1), np.zeros(1), np.eye(1))
    traj = rollout_controls(model, np.array([1.0]), np.zeros((1, 1)))
    gains, _ = backward_pass(traj, model, cp)
    assert np.isclose(gains.k[0, 0], -0.5, atol=1e-12)


def test_backward_pass_matches_riccati_gains():
    rng = np.random.default_rng(4)
    A, B, Q, R, Qf, x0 = random_lqr(rng, 3, 2)
    model = LinearModel(A, B)
    cp = QuadraticCostParams(Q, R, np.zeros(3), Qf)
    opt, rg = riccati_lqr(A, B, Q, R, Qf, 20, x0)
    gains, expected = backward_pass(opt, model, cp)
    assert np.max(np.abs(gains.k)) <= 1e-8
    assert np.max(np.abs(gains.K - rg.K)) <= 1e-8
    assert abs(expected) <= 1e-12


def test_forward_pass_zero_step_is_identity():
    rng = np.random.default_rng(5)
    A, B, Q, R, Qf, x0 = random_lqr(rng, 2, 1)
    model = LinearModel(A, B)
    cp = QuadraticCostParams(Q, R, np.zeros(2), Qf)
    traj = rollout_controls(model, x0, rng.normal(size=(10, 1)))
    gains, _ = backward_pass(traj, model, cp)
    new, cost = forward_pass(traj, gains, model, 0.0, cp)
    assert np.array_equal(new.states, traj.states) and np.array_equal(new.controls, traj.controls)
    assert cost == trajectory_cost(traj.states, traj.controls, cp)


def test_forward_pass_full_step_reaches_lqr_optimum():
    rng = np.random.default_rng(6)
    A, B, Q, R, Qf, x0 = random_lqr(rng, 3, 1)
    model = LinearModel(A, B)
    cp = QuadraticCostParams(Q, R, np.zeros(3), Qf)
    traj = rollout_controls(model, x0, np.zeros((15, 1)))
    gains, _ = backward_pass(traj, model, cp)
    new, _ = forward_pass(traj, gains, model, 1.0, cp)
    opt, _ = riccati_lqr(A, B, Q, R, Qf, 15, x0)
    assert np.max(np.abs(new.controls - opt.controls)) <= 1e-9


def test_goal_equilibrium_needs_no_control():
    model = CartPole()
    cp = default_cost_params(model)
    res = solve_ddp(np.zeros(4), model, cp, T=50)
    assert res.cost <= 1e-8
    assert np.max(np.abs(res.trajectory.controls)) <= 1e-8


def test_random_lqr_instances_match_riccati():
    rng = np.random.default_rng(7)
    for _ in range(5):
        A, B, Q, R, Qf, x0 = random_lqr(rng)
        res, _, _ = _ddp_lqr(A, B, Q, R, Qf, x0, 50)
        opt, _ = riccati_lqr(A, B, Q, R, Qf, 50, x0)
        assert np.max(np.abs(res.trajectory.controls - opt.controls)) <= 1e-6


def test_cartpole_swing_up_regression():
    model = CartPole()
    cp = default_cost_params(model)
    res = solve_ddp(np.array([0.0, 0.0, np.pi, 0.0]), model, cp, T=200)
    assert model.task_error(res.trajectory.states[-1], np.zeros(1)) < 0.05
    hist = np.array(res.cost_history)
    assert np.all(np.diff(hist) < 0)
    assert hist[-1] <= hist[0]


@given(st.integers(0, 10_000))
def test_accepted_costs_strictly_decrease(seed):
    rng = np.random.default_rng(seed)
    model = CartPole()
    cp = default_cost_params(model)
    x0 = np.array([0.0, 0.0, rng.uniform(-1, 1), 0.0])
    res = solve_ddp(x0, model, cp, settings=DdpSettings(max_iters=15), T=30)
    assert np.all(np.diff(res.cost_history) < 0)


@given(st.integers(0, 10_000))
def test_shift_equivariance_on_linear_model(seed):
    rng = np.random.default_rng(seed)
    A, B, Q, R, Qf, x0 = random_lqr(rng, 2, 1)
    # an equilibrium offset: pick s in the null space of (A - I) by using A with eigenvalue 1 there
    s = rng.normal(size=2)
    A = A - np.outer((A - np.eye(2)) @ s, s) / (s @ s)
    model = LinearModel(A, B)
    base = solve_ddp(x0, model, QuadraticCostParams(Q, R, np.zeros(2), Qf), T=20)
    shifted = solve_ddp(x0 + s, model, QuadraticCostParams(Q, R, s, Qf), T=20)
    assert np.max(np.abs(base.trajectory.controls - shifted.trajectory.controls)) <= 1e-8


def test_proximal_dominance_on_linear_model():
    A, B = np.array([[1.0]]), np.array([[1.0]])
    model = LinearModel(A, B)
    cp = QuadraticCostParams(np.eye(1), np.eye(1), np.zeros(1), np.eye(1))
    T = 10
    rng = np.random.default_rng(8)
    u_pl, lam_u = rng.normal(size=(T, 1)), 0.1 * rng.normal(size=(T, 1))
    dists = []
    for rho in (1.0, 10.0, 100.0, 1e4, 1e6):
        ar = AdmmResidualTerms(0.0, rho, np.zeros((T, 1)), u_pl, np.zeros((T, 1)), lam_u)
        res = solve_ddp(np.array([0.5]), model, cp, ar, T=T)
        dists.append(np.max(np.abs(res.trajectory.controls - (u_pl - lam_u))))
    assert all(b < a for a, b in zip(dists, dists[1:]))
    assert dists[-1] < 1e-3


def test_twenty_lqr_instances_fast():
    rng = np.random.default_rng(9)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        A, B, Q, R, Qf, x0 = random_lqr(rng)
        res, _, _ = _ddp_lqr(A, B, Q, R, Qf, x0, 50)
        opt, _ = riccati_lqr(A, B, Q, R, Qf, 50, x0)
        worst = max(worst, np.max(np.abs(res.trajectory.controls - opt.controls)))
    assert worst <= 1e-6
    assert time.perf_counter() - t0 < 5.0


def test_trajectory_contract():
    with pytest.raises(Exception):
        Trajectory(np.zeros(2), np.zeros((3, 2)), np.zeros((3, 1)))
