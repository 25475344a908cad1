"""Analytic discrete-time dynamics: cart-pole and planar N-link arm.

All models integrate their continuous-time equations of motion with a single
explicit RK4 step of length ``dt``. Every function accepts arbitrary leading
batch dimensions: ``x`` has shape ``(..., d_x)`` and ``u`` shape ``(..., d_u)``.

Conventions
-----------
Cart-pole state is ``(p, p_dot, theta, theta_dot)`` with ``theta = 0`` upright
and ``theta = pi`` hanging down. The pole is a point mass at distance
``pole_length`` from a frictionless pivot.

Arm state is ``(q_1..q_n, qd_1..qd_n)`` with relative joint angles; ``q_1`` is
measured from the horizontal x-axis and gravity points along -y. Links are
uniform thin rods (centre of mass at mid-length, inertia ``m l^2 / 12``).
"""

from __future__ import annotations

import abc
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import DynamicsError, IntegrationOverflowError, ParameterError


@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 0.5
    gravity: float = 9.81
    dt: float = 0.01

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "pole_length", "dt"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be strictly positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class PlanarArmParams:
    n_links: int = 2
    link_masses: tuple = (1.0, 1.0)
    link_lengths: tuple = (0.5, 0.5)
    gravity: float = 9.81
    dt: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "link_masses", tuple(float(m) for m in self.link_masses))
        object.__setattr__(self, "link_lengths", tuple(float(v) for v in self.link_lengths))
        if self.n_links not in (2, 3):
            raise ParameterError(f"n_links must be 2 or 3, got {self.n_links}")
        if len(self.link_masses) != self.n_links or len(self.link_lengths) != self.n_links:
            raise ParameterError("link_masses and link_lengths must have n_links entries")
        if min(self.link_masses) <= 0 or min(self.link_lengths) <= 0:
            raise ParameterError("link masses and lengths must be strictly positive")
        if not self.dt > 0:
            raise ParameterError(f"dt must be strictly positive, got {self.dt}")


def rk4(deriv, x, u, dt):
    k1 = deriv(x, u)
    k2 = deriv(x + 0.5 * dt * k1, u)
    k3 = deriv(x + 0.5 * dt * k2, u)
    k4 = deriv(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class DynamicsModel(abc.ABC):
    """One-step map ``x' = f(x, u)`` plus energy and goal conventions."""

    kind: str
    d_x: int
    d_u: int
    d_goal: int

    @abc.abstractmethod
    def step(self, x, u, check=True):
        """Advance one step. Raises IntegrationOverflowError on non-finite output if ``check``."""

    def jacobians(self, x, u):
        return fd_jacobians(self.step, x, u)

    def energy(self, x):
        raise NotImplementedError

    def goal_state(self, goal):
        """Full goal state for goal parameters ``goal``."""
        raise NotImplementedError

    def task_error(self, x_final, goal):
        raise NotImplementedError


def _checked(x_next, check):
    if check and not np.all(np.isfinite(x_next)):
        raise IntegrationOverflowError("integration produced non-finite state")
    return x_next


class CartPole(DynamicsModel):
    kind = "cartpole"
    d_x = 4
    d_u = 1
    d_goal = 1  # target cart position

    def __init__(self, params: CartPoleParams | None = None):
        self.params = params or CartPoleParams()

    def deriv(self, x, u):
        p = self.params
        mc, mp, l, g = p.cart_mass, p.pole_mass, p.pole_length, p.gravity
        th, thd = x[..., 2], x[..., 3]
        s, c = np.sin(th), np.cos(th)
        force = u[..., 0]
        # from the Lagrangian with pole mass at (p + l sin th, l cos th)
        pdd = (force + mp * l * thd**2 * s - mp * g * s * c) / (mc + mp * s**2)
        thdd = (g * s - pdd * c) / l
        return np.stack([x[..., 1], pdd, thd, thdd], axis=-1)

    def step(self, x, u, check=True):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            x_next = rk4(self.deriv, x, u, self.params.dt)
        return _checked(x_next, check)

    def energy(self, x):
        p = self.params
        mc, mp, l, g = p.cart_mass, p.pole_mass, p.pole_length, p.gravity
        pd, th, thd = x[..., 1], x[..., 2], x[..., 3]
        kinetic = 0.5 * (mc + mp) * pd**2 + mp * l * pd * thd * np.cos(th) + 0.5 * mp * l**2 * thd**2
        return kinetic + mp * g * l * np.cos(th)

    def goal_state(self, goal):
        goal = np.asarray(goal, dtype=float)
        xg = np.zeros(goal.shape[:-1] + (4,))
        xg[..., 0] = goal[..., 0]
        return xg

    def task_error(self, x_final, goal):
        th = np.asarray(x_final)[..., 2]
        return np.abs(np.angle(np.exp(1j * th)))


class PlanarArm(DynamicsModel):
    kind = "arm"

    def __init__(self, params: PlanarArmParams | None = None):
        self.params = params or PlanarArmParams()
        n = self.params.n_links
        self.n = n
        self.d_x = 2 * n
        self.d_u = n
        self.d_goal = n  # target joint configuration
        m = np.array(self.params.link_masses)
        l = np.array(self.params.link_lengths)
        # a[i, j]: lever of link j's angle on link i's centre of mass
        a = np.zeros((n, n))
        for i in range(n):
            a[i, :i] = l[:i]
            a[i, i] = 0.5 * l[i]
        self._a = a
        self._D = (m[:, None, None] * a[:, :, None] * a[:, None, :]).sum(axis=0) + np.diag(m * l**2 / 12.0)
        self._G = (m[:, None] * a).sum(axis=0)
        self._S = np.tril(np.ones((n, n)))

    def mass_matrix(self, q):
        """Joint-space mass matrix M(q)."""
        phi = np.cumsum(q, axis=-1)
        m_abs = self._D * np.cos(phi[..., :, None] - phi[..., None, :])
        return self._S.T @ m_abs @ self._S

    def gravity_torque(self, q):
        """Joint torques g(q) that hold configuration ``q`` at rest."""
        phi = np.cumsum(q, axis=-1)
        g_abs = self.params.gravity * np.cos(phi) * self._G
        return np.flip(np.cumsum(np.flip(g_abs, -1), axis=-1), -1)

    def deriv(self, x, u):
        n = self.n
        q, qd = x[..., :n], x[..., n:]
        phi = np.cumsum(q, axis=-1)
        phid = np.cumsum(qd, axis=-1)
        diff = phi[..., :, None] - phi[..., None, :]
        m_abs = self._D * np.cos(diff)
        coriolis = np.einsum("...jk,...k->...j", self._D * np.sin(diff), phid**2)
        g_abs = self.params.gravity * np.cos(phi) * self._G
        # joint j torque acts on link j and reacts on link j+1
        tau_abs = u.copy()
        tau_abs[..., :-1] -= u[..., 1:]
        rhs = tau_abs - coriolis - g_abs
        try:
            phidd = np.linalg.solve(m_abs, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise DynamicsError("singular mass matrix") from exc
        qdd = phidd.copy()
        qdd[..., 1:] -= phidd[..., :-1]
        return np.concatenate([qd, qdd], axis=-1)

    def step(self, x, u, check=True):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            x_next = rk4(self.deriv, x, u, self.params.dt)
        return _checked(x_next, check)

    def energy(self, x):
        n = self.n
        phi = np.cumsum(x[..., :n], axis=-1)
        phid = np.cumsum(x[..., n:], axis=-1)
        m_abs = self._D * np.cos(phi[..., :, None] - phi[..., None, :])
        kinetic = 0.5 * np.einsum("...j,...jk,...k->...", phid, m_abs, phid)
        potential = self.params.gravity * (self._G * np.sin(phi)).sum(-1)
        return kinetic + potential

    def end_effector(self, q):
        phi = np.cumsum(np.asarray(q, dtype=float), axis=-1)
        l = np.array(self.params.link_lengths)
        return np.stack([(l * np.cos(phi)).sum(-1), (l * np.sin(phi)).sum(-1)], axis=-1)

    def goal_state(self, goal):
        goal = np.asarray(goal, dtype=float)
        return np.concatenate([goal, np.zeros_like(goal)], axis=-1)

    def task_error(self, x_final, goal):
        x_final = np.asarray(x_final, dtype=float)
        ee = self.end_effector(x_final[..., : self.n])
        return np.linalg.norm(ee - self.end_effector(goal), axis=-1)


@dataclass
class LinearModel(DynamicsModel):
    """Discrete linear system ``x' = A x + B u``; used for LQR checks and diagnostics."""

    A: np.ndarray
    B: np.ndarray
    kind: str = field(default="linear", init=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.d_x = self.A.shape[0]
        self.d_u = self.B.shape[1]
        self.d_goal = self.d_x

    def step(self, x, u, check=True):
        x_next = np.asarray(x, dtype=float) @ self.A.T + np.asarray(u, dtype=float) @ self.B.T
        return _checked(x_next, check)

    def jacobians(self, x, u):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        return (np.broadcast_to(self.A, lead + self.A.shape).copy(),
                np.broadcast_to(self.B, lead + self.B.shape).copy())

    def goal_state(self, goal):
        return np.asarray(goal, dtype=float)

    def task_error(self, x_final, goal):
        return np.linalg.norm(np.asarray(x_final) - np.asarray(goal), axis=-1)


def fd_jacobians(step, x, u, h=1e-5):
    """Central finite-difference Jacobians of ``step`` at ``(x, u)``.

    Returns ``f_x`` of shape ``(..., d_x, d_x)`` and ``f_u`` of shape
    ``(..., d_x, d_u)``. All perturbations are evaluated in one batched call.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d_x, d_u = x.shape[-1], u.shape[-1]
    n = d_x + d_u
    xu = np.concatenate([x, u], axis=-1)
    eye = np.eye(n) * h
    pert = np.concatenate([xu[..., None, :] + eye, xu[..., None, :] - eye], axis=-2)
    out = step(pert[..., :d_x], pert[..., d_x:])
    jac = (out[..., :n, :] - out[..., n:, :]) / (2.0 * h)
    jac = np.swapaxes(jac, -1, -2)
    return jac[..., :d_x], jac[..., d_x:]


def dynamics_jacobians(model: DynamicsModel, x, u):
    """Jacobians ``(f_x, f_u)`` of the model's one-step map."""
    return model.jacobians(x, u)


def cartpole_step(params: CartPoleParams, x, u):
    return CartPole(params).step(x, u)


def arm_step(params: PlanarArmParams, x, u):
    return PlanarArm(params).step(x, u)


def mass_scaled(params, delta_mass: float):
    """Copy of ``params`` with every body mass reduced by ``delta_mass`` kg."""
    if delta_mass == 0:
        return params
    if isinstance(params, CartPoleParams):
        cart, pole = params.cart_mass - delta_mass, params.pole_mass - delta_mass
        if cart <= 0 or pole <= 0:
            raise ParameterError(f"delta_mass={delta_mass} leaves a non-positive mass")
        return dataclasses.replace(params, cart_mass=cart, pole_mass=pole)
    if isinstance(params, PlanarArmParams):
        masses = tuple(m - delta_mass for m in params.link_masses)
        if min(masses) <= 0:
            raise ParameterError(f"delta_mass={delta_mass} leaves a non-positive link mass")
        return dataclasses.replace(params, link_masses=masses)
    raise ParameterError(f"unsupported params type {type(params).__name__}")


def make_model(params) -> DynamicsModel:
    if isinstance(params, CartPoleParams):
        return CartPole(params)
    if isinstance(params, PlanarArmParams):
        return PlanarArm(params)
    raise ParameterError(f"unsupported params type {type(params).__name__}")
