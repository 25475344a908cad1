"""Differential dynamic programming for the per-trajectory TO subproblem.

The backward pass uses the Gauss-Newton expansion of the Q-function (dynamics
second derivatives are dropped, as in iLQR). Regularisation ``mu`` is added to
``Q_uu``; it escalates x10 when a pass fails and decays x1/2 on success. The
line search evaluates all step scales in one batched rollout and accepts the
largest one satisfying an Armijo condition against the expected decrease.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .costs import AdmmResidualTerms, QuadraticCostParams, running_cost, terminal_cost
from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    x0: np.ndarray
    states: np.ndarray  # (T+1, d_x), states[0] == x0
    controls: np.ndarray  # (T, d_u)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ContractError("states must have one more entry than controls")
        if not np.array_equal(self.states[0], self.x0):
            raise ContractError("states[0] must equal x0")

    @property
    def T(self):
        return self.controls.shape[0]


@dataclass
class DdpGains:
    k: np.ndarray  # (T, d_u)
    K: np.ndarray  # (T, d_u, d_x)
    dv1: float = 0.0  # sum k' Q_u
    dv2: float = 0.0  # sum 1/2 k' Q_uu k

    def expected_change(self, alpha):
        return alpha * self.dv1 + alpha**2 * self.dv2


@dataclass
class DdpSettings:
    max_iters: int = 200
    cost_tolerance: float = 1e-9
    mu_init: float = 0.0
    mu_min: float = 1e-6
    mu_max: float = 1e10
    line_search: tuple = (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625)
    armijo: float = 1e-4
    u_limit: float | None = None

    def __post_init__(self):
        if self.cost_tolerance <= 0 or self.mu_max <= 0 or self.max_iters < 0:
            raise ContractError("DDP tolerances must be positive")
        ls = tuple(float(a) for a in self.line_search)
        if not ls or ls[0] > 1 or ls[-1] <= 0 or any(b >= a for a, b in zip(ls, ls[1:])):
            raise ContractError("line-search schedule must be strictly decreasing in (0, 1]")
        self.line_search = ls


@dataclass
class DdpResult:
    trajectory: Trajectory
    cost_history: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    gains: DdpGains | None = None

    @property
    def cost(self):
        return self.cost_history[-1]


class NotPositiveDefinite(ArithmeticError):
    """``Q_uu + mu I`` is not positive definite; raise ``mu`` and retry."""


def _residuals(ar, d_x, d_u, T):
    return ar if ar is not None else AdmmResidualTerms.zeros(d_x, d_u, T)


def trajectory_cost(states, controls, cp, ar=None):
    """Augmented cost; ``states``/``controls`` may carry a leading batch axis."""
    run = running_cost(states[..., :-1, :], controls, cp, ar)[0].sum(-1)
    return run + terminal_cost(states[..., -1, :], cp)[0]


def backward_pass(traj: Trajectory, model, cp: QuadraticCostParams, ar=None, mu=0.0):
    """Riccati-like sweep producing feedforward/feedback gains.

    Returns ``(gains, expected_decrease)`` where ``expected_decrease`` is the
    predicted cost reduction of a full step. Raises NotPositiveDefinite when the
    regularised ``Q_uu`` is not positive definite.
    """
    T = traj.T
    d_x, d_u = model.d_x, model.d_u
    ar = _residuals(ar, d_x, d_u, T)
    f_x, f_u = model.jacobians(traj.states[:-1], traj.controls)
    _, l_x, l_u, l_xx, l_uu, l_ux = running_cost(traj.states[:-1], traj.controls, cp, ar)
    _, V_x, V_xx = terminal_cost(traj.states[-1], cp)
    k = np.zeros((T, d_u))
    K = np.zeros((T, d_u, d_x))
    dv1 = dv2 = 0.0
    reg = mu * np.eye(d_u)
    for t in range(T - 1, -1, -1):
        A, B = f_x[t], f_u[t]
        Q_x = l_x[t] + A.T @ V_x
        Q_u = l_u[t] + B.T @ V_x
        VB = V_xx @ B
        Q_xx = l_xx + A.T @ V_xx @ A
        Q_uu = l_uu + B.T @ VB
        Q_ux = l_ux + VB.T @ A
        try:
            L = np.linalg.cholesky(Q_uu + reg)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(f"Q_uu + mu I not positive definite at t={t}") from exc
        rhs = np.column_stack([Q_u, Q_ux])
        sol = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        k[t] = -sol[:, 0]
        K[t] = -sol[:, 1:]
        kt, Kt = k[t], K[t]
        V_x = Q_x + Kt.T @ Q_uu @ kt + Kt.T @ Q_u + Q_ux.T @ kt
        V_xx = Q_xx + Kt.T @ Q_uu @ Kt + Kt.T @ Q_ux + Q_ux.T @ Kt
        V_xx = 0.5 * (V_xx + V_xx.T)
        dv1 += kt @ Q_u
        dv2 += 0.5 * kt @ Q_uu @ kt
    gains = DdpGains(k, K, float(dv1), float(dv2))
    return gains, -gains.expected_change(1.0)


def rollout_controls(model, x0, controls, u_limit=None):
    """Open-loop rollout of a control sequence."""
    T = controls.shape[0]
    states = np.empty((T + 1, model.d_x))
    states[0] = x0
    for t in range(T):
        u = controls[t] if u_limit is None else np.clip(controls[t], -u_limit, u_limit)
        states[t + 1] = model.step(states[t], u)
    return Trajectory(x0, states, controls)


def _forward_batch(traj, gains, model, alphas, u_limit=None):
    alphas = np.asarray(alphas, dtype=float)
    n = alphas.shape[0]
    T = traj.T
    xs = np.empty((n, T + 1, model.d_x))
    us = np.empty((n, T, model.d_u))
    xs[:, 0] = traj.x0
    for t in range(T):
        u = traj.controls[t] + alphas[:, None] * gains.k[t] + (xs[:, t] - traj.states[t]) @ gains.K[t].T
        if u_limit is not None:
            u = np.clip(u, -u_limit, u_limit)
        us[:, t] = u
        xs[:, t + 1] = model.step(xs[:, t], u, check=False)
    return xs, us


def forward_pass(traj: Trajectory, gains: DdpGains, model, alpha, cp=None, ar=None, u_limit=None):
    """Closed-loop rollout ``u = u_bar + alpha k + K (x - x_bar)``.

    Returns ``(new_traj, new_cost)``; ``new_cost`` is ``inf`` for a non-finite
    rollout (rejected candidate) and ``None`` when ``cp`` is not given.
    """
    xs, us = _forward_batch(traj, gains, model, [alpha], u_limit)
    xs, us = xs[0], us[0]
    finite = np.all(np.isfinite(xs)) and np.all(np.isfinite(us))
    cost = None
    if cp is not None:
        cost = float(trajectory_cost(xs, us, cp, ar)) if finite else np.inf
    if not finite:
        return None, np.inf
    return Trajectory(traj.x0, xs, us), cost


def solve_ddp(x0, model, cp: QuadraticCostParams, ar=None, settings: DdpSettings | None = None,
              u_init=None, T=None):
    """Minimise the (augmented) trajectory cost from ``x0``.

    ``u_init`` seeds the nominal controls (zeros by default, requires ``T``).
    Returns a DdpResult whose ``cost_history`` is non-increasing; when no step
    can be accepted even at ``mu_max`` the result has ``converged=False`` and
    carries the best trajectory found.
    """
    settings = settings or DdpSettings()
    if u_init is None:
        if T is None:
            raise ContractError("either u_init or T is required")
        u_init = np.zeros((T, model.d_u))
    u_init = np.array(u_init, dtype=float)
    T = u_init.shape[0]
    ar = _residuals(ar, model.d_x, model.d_u, T)
    traj = rollout_controls(model, np.asarray(x0, dtype=float), u_init, settings.u_limit)
    if settings.u_limit is not None:
        traj.controls = np.clip(traj.controls, -settings.u_limit, settings.u_limit)
    cost = float(trajectory_cost(traj.states, traj.controls, cp, ar))
    history = [cost]
    mu = settings.mu_init
    alphas = np.array(settings.line_search)
    converged = False
    gains = None
    it = 0
    while it < settings.max_iters:
        try:
            gains, expected = backward_pass(traj, model, cp, ar, mu)
        except NotPositiveDefinite:
            mu = max(settings.mu_min, mu * 10.0)
            if mu > settings.mu_max:
                log.warning("DDP: regularisation exceeded mu_max in backward pass")
                break
            continue
        it += 1
        if expected <= settings.cost_tolerance * max(1.0, abs(cost)):
            converged = True
            break
        xs, us = _forward_batch(traj, gains, model, alphas, settings.u_limit)
        with np.errstate(over="ignore", invalid="ignore"):
            costs = trajectory_cost(xs, us, cp, ar)
        costs = np.where(np.isfinite(costs), costs, np.inf)
        accepted = None
        for i, a in enumerate(alphas):
            predicted = gains.expected_change(a)
            if costs[i] < cost and cost - costs[i] >= -settings.armijo * predicted:
                accepted = i
                break
        if accepted is None:
            mu = max(settings.mu_min, mu * 10.0)
            if mu > settings.mu_max:
                log.warning("DDP: no step accepted at mu_max")
                break
            continue
        new_cost = float(costs[accepted])
        traj = Trajectory(traj.x0, xs[accepted], us[accepted])
        change = cost - new_cost
        cost = new_cost
        history.append(cost)
        mu = mu * 0.5
        if mu < settings.mu_min:
            mu = 0.0
        if change <= settings.cost_tolerance * max(1.0, abs(cost)):
            converged = True
            break
    return DdpResult(traj, history, converged, it, gains)


def riccati_lqr(A, B, Q, R, Q_f, T, x0):
    """Finite-horizon discrete LQR for cost ``sum x'Qx + u'Ru + x_T' Q_f x_T``.

    Returns ``(trajectory, gains)`` with ``gains.K[t]`` the optimal feedback
    ``u_t = K_t x_t`` and zero feedforward.
    """
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R, Q_f = (np.atleast_2d(m).astype(float) for m in (Q, R, Q_f))
    d_x, d_u = B.shape
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise ContractError("R must be positive definite") from exc
    P = Q_f
    K = np.zeros((T, d_u, d_x))
    for t in range(T - 1, -1, -1):
        BtP = B.T @ P
        K[t] = -np.linalg.solve(R + BtP @ B, BtP @ A)
        P = Q + A.T @ P @ A + A.T @ P @ B @ K[t]
        P = 0.5 * (P + P.T)
    x = np.empty((T + 1, d_x))
    u = np.empty((T, d_u))
    x[0] = np.asarray(x0, dtype=float).reshape(d_x)
    for t in range(T):
        u[t] = K[t] @ x[t]
        x[t + 1] = A @ x[t] + B @ u[t]
    return Trajectory(x[0], x, u), DdpGains(np.zeros((T, d_u)), K)


def riccati_value_matrix(A, B, Q, R, Q_f, T):
    """Cost-to-go matrix ``P_0`` such that the optimal cost is ``x0' P_0 x0``."""
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R, Q_f = (np.atleast_2d(m).astype(float) for m in (Q, R, Q_f))
    P = Q_f
    for _ in range(T):
        BtP = B.T @ P
        Kt = -np.linalg.solve(R + BtP @ B, BtP @ A)
        P = Q + A.T @ P @ A + A.T @ P @ B @ Kt
    return 0.5 * (P + P.T)
