"""End-to-end experiments behind the acceptance checks and ``scripts/``.

Each function takes a validated :class:`RunConfig` (or plain numbers) and
returns a dict of metrics; nothing is written to disk.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import config as C
from . import policy_net as pn
from .admm import AdmmState, policy_inputs, run_admm
from .advreg import train_policy
from .cli import STREAM_EVAL_INIT, STREAM_INIT, STREAM_LIPSCHITZ, STREAM_POLICY_INIT, STREAM_ROLLOUT, sample_inits
from .ddp import solve_ddp
from .evaluation import DisturbanceSpec, empirical_lipschitz, lemma2_bound_check, rollout_batch


def _initial_policy(cfg, model):
    seed = int(np.random.default_rng([cfg.seed, STREAM_POLICY_INIT]).integers(2**31))
    return pn.init(C.layer_dims(cfg, model), seed)


def train_admm(cfg: C.RunConfig, kind=None, epsilon=None, on_iteration=None):
    """Sample the training set from ``cfg`` and run ADMM. Returns ``(AdmmResult, model, cost)``."""
    model = C.build_model(cfg)
    cost = C.build_cost(cfg, model)
    x0, goals = sample_inits(cfg, cfg.dataset.N, STREAM_INIT)
    res = run_admm(x0, goals, model, cost, cfg.dataset.T, _initial_policy(cfg, model),
                   C.build_admm_settings(cfg), C.build_perturbation(cfg, model, epsilon),
                   kind or cfg.training.regularizer, C.build_train_settings(cfg), C.build_ddp_settings(cfg),
                   seed=cfg.seed, on_iteration=on_iteration)
    return res, model, cost


def held_out(cfg: C.RunConfig, M=None):
    return sample_inits(cfg, M or cfg.eval.M, STREAM_EVAL_INIT)


def ddp_baseline(cfg, model, cost, x0, goals, T):
    settings = C.build_ddp_settings(cfg)
    return np.array([solve_ddp(x0[i], model, cost.with_goal(model.goal_state(goals[i])), None, settings, T=T).cost
                     for i in range(x0.shape[0])])


def policy_rollouts(cfg, W, model, cost, x0, goals, T, disturbance=DisturbanceSpec()):
    rngs = [np.random.default_rng([cfg.seed, STREAM_ROLLOUT, i]) for i in range(x0.shape[0])]
    return rollout_batch(W, model, x0, goals, T, disturbance, rngs, cost, cfg.eval.blowup)


def swingup_generalization(cfg: C.RunConfig, angle_tol=0.2, cost_ratio=2.0):
    """Train with ADMM, then roll out on held-out initial conditions.

    A rollout succeeds when the final pole angle is within ``angle_tol`` of
    upright and its cost is at most ``cost_ratio`` times the DDP cost from the
    same initial condition.
    """
    t0 = time.perf_counter()
    res, model, cost = train_admm(cfg)
    x0, goals = held_out(cfg)
    T = cfg.eval.T or cfg.dataset.T
    base = ddp_baseline(cfg, model, cost, x0, goals, T)
    rolls = policy_rollouts(cfg, res.params, model, cost, x0, goals, T)
    err = np.array([r.task_error for r in rolls])
    c = np.array([r.cost for r in rolls])
    ok = (err < angle_tol) & (c <= cost_ratio * base)
    return {"success_rate": float(ok.mean()), "angle_ok": float((err < angle_tol).mean()),
            "cost_ok": float((c <= cost_ratio * base).mean()), "median_cost_ratio": float(np.median(c / base)),
            "history": res.history, "seconds": time.perf_counter() - t0, "params": res.params}


def admm_trend(cfg: C.RunConfig):
    t0 = time.perf_counter()
    res, _, _ = train_admm(cfg)
    return {"history": res.history, "seconds": time.perf_counter() - t0}


def lipschitz_at_states(cfg, W, Z, epsilon, samples):
    return np.array([empirical_lipschitz(W, z, epsilon, samples, np.random.default_rng([cfg.seed, STREAM_LIPSCHITZ, j])).C
                     for j, z in enumerate(Z)])


def smoothness_comparison(cfg: C.RunConfig, kinds=("sar", "none")):
    """Clone the same DDP dataset with each regulariser; compare local Lipschitz estimates.

    The estimates are taken at ``eval.lipschitz_points`` states drawn from the
    training trajectories with radius ``eval.lipschitz_epsilon`` (defaults to
    the perturbation radius).
    """
    model = C.build_model(cfg)
    cost = C.build_cost(cfg, model)
    x0, goals = sample_inits(cfg, cfg.dataset.N, STREAM_INIT)
    st = AdmmState.initial(x0, goals, model, cfg.dataset.T, 0.0, 0.0)
    ddp_settings = C.build_ddp_settings(cfg)
    for i in range(st.N):
        r = solve_ddp(x0[i], model, cost.with_goal(model.goal_state(goals[i])), None, ddp_settings, T=cfg.dataset.T)
        st.X_TO[i], st.U_TO[i] = r.trajectory.states, r.trajectory.controls
    Z, U = policy_inputs(st.X_TO[:, :-1], goals), st.U_TO.reshape(-1, model.d_u)
    pick = np.random.default_rng([cfg.seed, STREAM_LIPSCHITZ]).choice(
        Z.shape[0], size=min(cfg.eval.lipschitz_points, Z.shape[0]), replace=False)
    eps = cfg.eval.lipschitz_epsilon or cfg.perturbation.epsilon
    W0 = _initial_policy(cfg, model)
    out = {}
    for kind in kinds:
        W = train_policy((Z, U), W0, C.build_perturbation(cfg, model), kind, C.build_train_settings(cfg),
                         np.random.default_rng([cfg.seed, 1]), n_traj=st.N).params
        lips = lipschitz_at_states(cfg, W, Z[pick], eps, cfg.eval.lipschitz_samples)
        out[kind] = {"median": float(np.median(lips)), "mean": float(lips.mean()), "params": W}
    return out


def robustness_comparison(cfg: C.RunConfig, zeta=0.01, kinds=("sar", "gaussian")):
    """Mean final task error under sensor noise for policies trained with each regulariser."""
    x0, goals = held_out(cfg)
    T = cfg.eval.T or cfg.dataset.T
    out = {}
    for kind in kinds:
        res, model, cost = train_admm(cfg, kind=kind)
        rolls = policy_rollouts(cfg, res.params, model, cost, x0, goals, T, DisturbanceSpec("sensor", zeta))
        err = np.array([r.task_error for r in rolls])
        out[kind] = {"mean_task_error": float(err.mean()), "diverged": int(sum(r.diverged for r in rolls)),
                     "history": res.history}
    return out


def random_stable_instance(rng, d_x, gamma):
    """Linear system, linear policy and PSD costs with ``gamma * |A + BK| < 1``."""
    while True:
        A = rng.normal(0.0, 0.6, (d_x, d_x))
        B = rng.normal(0.0, 1.0, (d_x, 1))
        K = rng.normal(0.0, 0.4, (1, d_x))
        if gamma * np.linalg.norm(A + B @ K, 2) < 1:
            break
    G = rng.normal(size=(d_x, d_x))
    return A, B, K, G @ G.T / d_x + 0.1 * np.eye(d_x), np.array([[rng.uniform(0.1, 2.0)]])


def value_bound_family(n_instances=50, n_samples=1000, seed=0):
    """Bound diagnostics on random 1-D and 2-D linear instances."""
    rng = np.random.default_rng(seed)
    diags = []
    for i in range(n_instances):
        d_x = 1 + i % 2
        gamma = rng.uniform(0.5, 0.95)
        A, B, K, Qc, Rc = random_stable_instance(rng, d_x, gamma)
        diags.append(lemma2_bound_check(A, B, K, Qc, Rc, gamma, rng.uniform(0.005, 0.2), n_samples, rng,
                                        x0=rng.normal(size=d_x)))
    return diags


def with_overrides(cfg: C.RunConfig, **sections):
    """Copy of ``cfg`` with fields of nested sections replaced, e.g. ``training={'epochs': 5}``."""
    changes = {name: dataclasses.replace(getattr(cfg, name), **fields) for name, fields in sections.items()}
    return dataclasses.replace(cfg, **changes)
