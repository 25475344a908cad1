"""ADMM coupling of trajectory optimisation (TO) and policy learning (PL).

Each iteration runs four updates:

1. primal TO: per-trajectory DDP on the tracking cost plus the proximal terms
   ``rho/2 |x - x_pl + lam|^2`` (pure tracking on the first iteration);
2. policy: adversarially regularised cloning on the PL copies, warm-started;
3. primal PL: per-point minimisation of cloning loss plus proximal terms;
4. dual: ``lam += TO - PL``.

Consensus covers the T state-control pairs ``(x_t, u_t), t < T`` of every
trajectory; the terminal state only enters the TO cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import policy_net as pn
from .advreg import PerturbationConfig, TrainSettings, bc_loss, train_policy
from .costs import AdmmResidualTerms, QuadraticCostParams
from .ddp import DdpSettings, solve_ddp
from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class AdmmSettings:
    max_iterations: int = 15
    patience: int = 2
    rho_x: float = 10.0
    rho_u: float = 1.0
    pl_steps: int = 50
    pl_step_size: float = 1e-2
    policy_epochs: int = 100

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ContractError("max_iterations must be >= 1")
        if self.rho_x < 0 or self.rho_u < 0:
            raise ContractError("penalties must be nonnegative")


@dataclass
class AdmmState:
    x0: np.ndarray  # (N, d_x)
    goals: np.ndarray  # (N, d_goal)
    X_TO: np.ndarray  # (N, T+1, d_x)
    U_TO: np.ndarray  # (N, T, d_u)
    X_PL: np.ndarray  # (N, T, d_x)
    U_PL: np.ndarray  # (N, T, d_u)
    lam_X: np.ndarray
    lam_U: np.ndarray
    rho_x: float
    rho_u: float
    iteration: int = 0
    ddp_failures: int = 0
    history: list = field(default_factory=list)
    epoch_history: list = field(default_factory=list)  # per-epoch policy training records

    @classmethod
    def initial(cls, x0, goals, model, T, rho_x, rho_u):
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        goals = np.atleast_2d(np.asarray(goals, dtype=float))
        N = x0.shape[0]
        if N < 1 or goals.shape[0] != N:
            raise ContractError("need N >= 1 initial conditions with one goal each")
        zx = np.zeros((N, T, model.d_x))
        zu = np.zeros((N, T, model.d_u))
        X_TO = np.zeros((N, T + 1, model.d_x))
        X_TO[:, 0] = x0
        return cls(x0, goals, X_TO, zu.copy(), zx.copy(), zu.copy(), zx.copy(), zu.copy(), rho_x, rho_u)

    @property
    def N(self):
        return self.x0.shape[0]

    @property
    def T(self):
        return self.U_TO.shape[1]

    def primal_residuals(self):
        rx = float(np.linalg.norm(self.X_TO[:, :-1] - self.X_PL))
        ru = float(np.linalg.norm(self.U_TO - self.U_PL))
        return rx, ru

    def pl_dataset(self):
        """Policy inputs ``[x, goal]`` and targets from the PL copies, flattened over (i, t)."""
        return policy_inputs(self.X_PL, self.goals), self.U_PL.reshape(-1, self.U_PL.shape[-1])

    def to_dataset(self):
        return policy_inputs(self.X_TO[:, :-1], self.goals), self.U_TO.reshape(-1, self.U_TO.shape[-1])


def policy_inputs(X, goals):
    """Stack ``[x_t, goal_i]`` for states ``X`` of shape ``(N, T, d_x)``."""
    N, T, _ = X.shape
    G = np.broadcast_to(goals[:, None, :], (N, T, goals.shape[-1]))
    return np.concatenate([X, G], axis=-1).reshape(N * T, -1)


def primal_to_update(state: AdmmState, model, cost_params: QuadraticCostParams,
                     ddp_settings: DdpSettings | None = None, warm_start=True):
    """Re-solve every trajectory with DDP on the augmented cost (in place)."""
    first = state.iteration == 0
    failures = 0
    for i in range(state.N):
        cp = cost_params.with_goal(model.goal_state(state.goals[i]))
        if first:
            ar = None
        else:
            ar = AdmmResidualTerms(state.rho_x, state.rho_u, state.X_PL[i], state.U_PL[i],
                                   state.lam_X[i], state.lam_U[i])
        u_init = state.U_TO[i] if (warm_start and not first) else np.zeros_like(state.U_TO[i])
        res = solve_ddp(state.x0[i], model, cp, ar, ddp_settings, u_init=u_init)
        if not res.converged:
            failures += 1
        state.X_TO[i] = res.trajectory.states
        state.U_TO[i] = res.trajectory.controls
    state.ddp_failures = failures
    if first:
        state.X_PL = state.X_TO[:, :-1].copy()
        state.U_PL = state.U_TO.copy()
    return failures


def policy_update(state: AdmmState, W_prev: pn.MlpParams, cfg: PerturbationConfig, kind="sar",
                  settings: TrainSettings | None = None, rng=None):
    """Warm-started regularised cloning on the PL copies."""
    Z, U = state.pl_dataset()
    return train_policy((Z, U), W_prev, cfg, kind, settings, rng, n_traj=state.N)


def pl_point_controls(pi_x, U_TO, lam_U, rho_u, N):
    """Closed-form PL controls ``(2 pi/N + rho_u (u_TO + lam_u)) / (2/N + rho_u)``."""
    return (2.0 * pi_x / N + rho_u * (U_TO + lam_U)) / (2.0 / N + rho_u)


def pl_objective(X, U, W, state: AdmmState):
    """Per-point primal PL objective, shape ``(N, T)``."""
    N, T, d_x = X.shape
    pi = pn.forward(W, policy_inputs(X, state.goals)).reshape(N, T, -1)
    bc = ((pi - U) ** 2).sum(-1) / N
    px = 0.5 * state.rho_x * ((state.X_TO[:, :-1] - X + state.lam_X) ** 2).sum(-1)
    pu = 0.5 * state.rho_u * ((state.U_TO - U + state.lam_U) ** 2).sum(-1)
    return bc + px + pu


def primal_pl_update(state: AdmmState, W: pn.MlpParams, steps=50, step_size=1e-2, max_halvings=30):
    """Minimise the PL subproblem (in place).

    Every (i, t) point decouples. Controls are eliminated in closed form; states
    follow gradient descent with per-point backtracking on the reduced objective
    starting from ``X_TO + lam_X``. Returns the number of points whose objective
    could not be reduced below that of the previous PL copies (they are kept).
    """
    N, T, d_x = state.X_PL.shape
    d_u = state.U_PL.shape[-1]
    rho_x, rho_u = state.rho_x, state.rho_u
    prev_obj = pl_objective(state.X_PL, state.U_PL, W, state)
    center = state.X_TO[:, :-1] + state.lam_X
    target = state.U_TO + state.lam_U
    # reduced weight on |pi(x) - target|^2 after minimising over u
    a, b = 1.0 / N, 0.5 * rho_u
    c = a * b / (a + b) if (a + b) > 0 else 0.0
    goals = np.broadcast_to(state.goals[:, None, :], (N, T, state.goals.shape[-1])).reshape(N * T, -1)

    def reduced(Xf):
        pi = pn.forward(W, np.concatenate([Xf, goals], axis=-1))
        return (c * ((pi - target.reshape(-1, d_u)) ** 2).sum(-1)
                + 0.5 * rho_x * ((center.reshape(-1, d_x) - Xf) ** 2).sum(-1)), pi

    Xf = center.reshape(-1, d_x).copy()
    obj, pi = reduced(Xf)
    for _ in range(steps):
        z = np.concatenate([Xf, goals], axis=-1)
        g = pn.grad_input(W, z, 2.0 * c * (pi - target.reshape(-1, d_u)))[:, :d_x]
        g = g - rho_x * (center.reshape(-1, d_x) - Xf)
        step = np.full(Xf.shape[0], step_size)
        pending = np.ones(Xf.shape[0], dtype=bool)
        for _ in range(max_halvings):
            cand = Xf - step[:, None] * g
            new_obj, new_pi = reduced(cand)
            ok = pending & (new_obj <= obj)
            Xf[ok] = cand[ok]
            obj[ok] = new_obj[ok]
            pi[ok] = new_pi[ok]
            pending &= ~ok
            if not pending.any():
                break
            step = np.where(pending, step * 0.5, step)
    X_new = Xf.reshape(N, T, d_x)
    pi_x = pn.forward(W, policy_inputs(X_new, state.goals)).reshape(N, T, d_u)
    if rho_u > 0:
        U_new = pl_point_controls(pi_x, state.U_TO, state.lam_U, rho_u, N)
    else:
        U_new = pi_x
    new_obj = pl_objective(X_new, U_new, W, state)
    worse = new_obj > prev_obj
    # points that are already better in the previous copy keep it
    X_new[worse] = state.X_PL[worse]
    U_new[worse] = state.U_PL[worse]
    state.X_PL = X_new
    state.U_PL = U_new
    return int(worse.sum())


def dual_update(state: AdmmState):
    state.lam_X = state.lam_X + (state.X_TO[:, :-1] - state.X_PL)
    state.lam_U = state.lam_U + (state.U_TO - state.U_PL)


@dataclass
class AdmmResult:
    params: pn.MlpParams
    state: AdmmState
    history: list
    best_iteration: int


def run_admm(x0, goals, model, cost_params: QuadraticCostParams, T, W0: pn.MlpParams,
             settings: AdmmSettings | None = None, cfg: PerturbationConfig | None = None,
             kind="sar", train_settings: TrainSettings | None = None,
             ddp_settings: DdpSettings | None = None, seed=0, on_iteration=None):
    """Alternate the four ADMM updates until cloning loss stalls or ``max_iterations``.

    ``on_iteration(record, W)`` is called after each iteration. Returns the
    parameters with the lowest recorded cloning loss.
    """
    settings = settings or AdmmSettings()
    cfg = cfg or PerturbationConfig()
    train_settings = train_settings or TrainSettings(epochs=settings.policy_epochs)
    state = AdmmState.initial(x0, goals, model, T, settings.rho_x, settings.rho_u)
    W = W0
    best_W, best_q, best_it = W0, np.inf, 0
    stale = 0
    for p in range(1, settings.max_iterations + 1):
        failures = primal_to_update(state, model, cost_params, ddp_settings)
        rng = np.random.default_rng([seed, p])
        res = policy_update(state, W, cfg, kind, train_settings, rng)
        W = res.params
        state.epoch_history.extend({"iteration": p, **h} for h in res.history)
        q_bc = res.final_bc
        q_bc_to = bc_loss(state.to_dataset(), W, state.N)
        primal_pl_update(state, W, settings.pl_steps, settings.pl_step_size)
        dual_update(state)
        state.iteration = p
        rx, ru = state.primal_residuals()
        record = {"iteration": p, "q_bc": q_bc, "q_bc_to": q_bc_to, "primal_residual_x": rx,
                  "primal_residual_u": ru, "ddp_failures": failures}
        state.history.append(record)
        log.info("ADMM iter %d: Q_BC=%.6g Q_BC(TO)=%.6g r_x=%.4g r_u=%.4g failures=%d",
                 p, q_bc, q_bc_to, rx, ru, failures)
        if on_iteration is not None:
            on_iteration(record, W)
        if q_bc < best_q:
            best_W, best_q, best_it = W, q_bc, p
            stale = 0
        else:
            stale += 1
            if stale >= settings.patience:
                break
    return AdmmResult(best_W, state, state.history, best_it)
