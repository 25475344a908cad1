"""Quadratic tracking cost with ADMM residual terms and analytic derivatives.

Running cost::

    l(x, u) = xh' Q xh + u' R u
              + rho_x/2 |x - x_pl + lam_x|^2 + rho_u/2 |u - u_pl + lam_u|^2

with ``xh = x - x_goal``. Terminal cost is ``xh' Q_f xh``. Hessians are
constant, so ``l_xx = 2Q + rho_x I``, ``l_uu = 2R + rho_u I`` and ``l_ux = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def _check_psd(name, mat, tol=1e-10):
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ContractError(f"{name} must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=tol):
        raise ContractError(f"{name} must be symmetric")
    if mat.size and np.linalg.eigvalsh(mat).min() < -tol * max(1.0, np.abs(mat).max()):
        raise ContractError(f"{name} must be positive semidefinite")


@dataclass
class QuadraticCostParams:
    Q: np.ndarray
    R: np.ndarray
    x_goal: np.ndarray
    Q_f: np.ndarray

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.Q_f = np.atleast_2d(np.asarray(self.Q_f, dtype=float))
        self.x_goal = np.asarray(self.x_goal, dtype=float)
        for name in ("Q", "R", "Q_f"):
            _check_psd(name, getattr(self, name))
        d_x = self.Q.shape[0]
        if self.Q_f.shape != (d_x, d_x) or self.x_goal.shape[-1] != d_x:
            raise ContractError("Q, Q_f and x_goal dimensions disagree")

    @property
    def d_x(self):
        return self.Q.shape[0]

    @property
    def d_u(self):
        return self.R.shape[0]

    def with_goal(self, x_goal):
        return QuadraticCostParams(self.Q, self.R, x_goal, self.Q_f)


@dataclass
class AdmmResidualTerms:
    """Per-step ADMM proximal terms.

    Arrays may carry a leading time axis. ``rho_x = rho_u = 0`` (the state at the
    first ADMM iteration) reduces the running cost to plain tracking.
    """

    rho_x: float
    rho_u: float
    x_pl: np.ndarray
    u_pl: np.ndarray
    lambda_x: np.ndarray
    lambda_u: np.ndarray

    def __post_init__(self):
        if self.rho_x < 0 or self.rho_u < 0:
            raise ContractError("penalties must be nonnegative")
        self.x_pl = np.asarray(self.x_pl, dtype=float)
        self.u_pl = np.asarray(self.u_pl, dtype=float)
        self.lambda_x = np.asarray(self.lambda_x, dtype=float)
        self.lambda_u = np.asarray(self.lambda_u, dtype=float)
        if self.x_pl.shape != self.lambda_x.shape or self.u_pl.shape != self.lambda_u.shape:
            raise ContractError("ADMM copies and duals must share shapes")

    @classmethod
    def zeros(cls, d_x, d_u, T=None):
        lead = () if T is None else (T,)
        return cls(0.0, 0.0, np.zeros(lead + (d_x,)), np.zeros(lead + (d_u,)),
                   np.zeros(lead + (d_x,)), np.zeros(lead + (d_u,)))

    def at(self, t):
        return AdmmResidualTerms(self.rho_x, self.rho_u, self.x_pl[t], self.u_pl[t],
                                 self.lambda_x[t], self.lambda_u[t])


def running_cost(x, u, cp: QuadraticCostParams, ar: AdmmResidualTerms | None = None):
    """Running cost and its derivatives.

    ``x`` and ``u`` may be stacked along leading axes (e.g. time); ``ar`` arrays
    must then broadcast against them. Returns
    ``(value, l_x, l_u, l_xx, l_uu, l_ux)``; the Hessians are unbatched.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != cp.d_x or u.shape[-1] != cp.d_u:
        raise ContractError(f"expected state dim {cp.d_x} and control dim {cp.d_u}, "
                            f"got {x.shape[-1]} and {u.shape[-1]}")
    xh = x - cp.x_goal
    Qxh = xh @ cp.Q
    Ru = u @ cp.R
    value = np.einsum("...i,...i->...", Qxh, xh) + np.einsum("...i,...i->...", Ru, u)
    l_x = 2.0 * Qxh
    l_u = 2.0 * Ru
    l_xx = 2.0 * cp.Q
    l_uu = 2.0 * cp.R
    if ar is not None and (ar.rho_x or ar.rho_u):
        if ar.x_pl.shape[-1] != cp.d_x or ar.u_pl.shape[-1] != cp.d_u:
            raise ContractError("ADMM residual terms do not match trajectory point shapes")
        rx = x - ar.x_pl + ar.lambda_x
        ru = u - ar.u_pl + ar.lambda_u
        value = value + 0.5 * ar.rho_x * (rx**2).sum(-1) + 0.5 * ar.rho_u * (ru**2).sum(-1)
        l_x = l_x + ar.rho_x * rx
        l_u = l_u + ar.rho_u * ru
        l_xx = l_xx + ar.rho_x * np.eye(cp.d_x)
        l_uu = l_uu + ar.rho_u * np.eye(cp.d_u)
    l_ux = np.zeros((cp.d_u, cp.d_x))
    return value, l_x, l_u, l_xx, l_uu, l_ux


def terminal_cost(x, cp: QuadraticCostParams):
    """Terminal cost ``xh' Q_f xh`` with gradient and Hessian."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != cp.d_x:
        raise ContractError(f"expected state dim {cp.d_x}, got {x.shape[-1]}")
    xh = x - cp.x_goal
    Qxh = xh @ cp.Q_f
    return np.einsum("...i,...i->...", Qxh, xh), 2.0 * Qxh, 2.0 * cp.Q_f


def tracking_cost(states, controls, cp: QuadraticCostParams):
    """Total tracking cost of a trajectory (running over T steps plus terminal)."""
    run = running_cost(states[..., :-1, :], controls, cp)[0].sum(-1)
    return run + terminal_cost(states[..., -1, :], cp)[0]


def default_cost_params(model, x_goal=None):
    """Default tracking weights for the shipped models."""
    if model.kind == "cartpole":
        Q = np.diag([1.0, 0.1, 10.0, 0.1])
        R = 0.01 * np.eye(1)
    else:
        n = model.d_u
        Q = np.diag([1.0] * n + [0.1] * n)
        R = 0.01 * np.eye(n)
    if x_goal is None:
        x_goal = np.zeros(model.d_x)
    return QuadraticCostParams(Q, R, x_goal, Q.copy())
