"""Policy rollouts under disturbances and the associated metrics.

Disturbances
------------
``sensor``          uniform noise in the l-inf ball of radius zeta added to the
                    state seen by the policy; the true state is untouched
``transition``      uniform l-inf(zeta) noise added to every next state
``model_mismatch``  rollout model has every mass reduced by ``delta_mass``

Rollouts are batched over initial conditions; each rollout draws its noise from
its own generator, so the noise a rollout sees does not depend on batch
composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import policy_net as pn
from .advreg import project_ball
from .costs import running_cost, terminal_cost
from .envs import make_model, mass_scaled
from .errors import ContractError

DISTURBANCES = ("none", "sensor", "transition", "model_mismatch")


@dataclass(frozen=True)
class DisturbanceSpec:
    kind: str = "none"
    zeta: float = 0.0
    delta_mass: float = 0.0

    def __post_init__(self):
        if self.kind not in DISTURBANCES:
            raise ContractError(f"unknown disturbance {self.kind!r}")
        if self.zeta < 0:
            raise ContractError("zeta must be nonnegative")

    @property
    def label(self):
        if self.kind == "none":
            return "none"
        if self.kind == "model_mismatch":
            return f"model_mismatch:{self.delta_mass:g}"
        return f"{self.kind}:{self.zeta:g}"


@dataclass
class RolloutResult:
    states: np.ndarray  # (T+1, d_x)
    controls: np.ndarray  # (T, d_u)
    cost: float
    task_error: float
    diverged: bool


def rollout_model(model, d: DisturbanceSpec):
    if d.kind == "model_mismatch":
        return make_model(mass_scaled(model.params, d.delta_mass))
    return model


def rollout_batch(W: pn.MlpParams, model, x0, goals, T, d: DisturbanceSpec, rngs, cost_params,
                  blowup=1e3):
    """Closed-loop rollouts of the policy from each row of ``x0``.

    ``rngs`` holds one generator per rollout. Returns a list of RolloutResult.
    A rollout whose state norm exceeds ``blowup`` (or turns non-finite) is
    frozen, flagged diverged and given infinite cost.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    goals = np.atleast_2d(np.asarray(goals, dtype=float))
    M = x0.shape[0]
    if len(rngs) != M:
        raise ContractError("need one generator per rollout")
    sim = rollout_model(model, d)
    xs = np.empty((M, T + 1, model.d_x))
    us = np.zeros((M, T, model.d_u))
    xs[:, 0] = x0
    diverged = np.zeros(M, dtype=bool)
    noisy = d.kind in ("sensor", "transition") and d.zeta > 0
    for t in range(T):
        x = xs[:, t]
        obs = x
        if noisy and d.kind == "sensor":
            obs = x + np.stack([r.uniform(-d.zeta, d.zeta, size=model.d_x) for r in rngs])
        u = pn.forward(W, np.concatenate([obs, goals], axis=-1))
        u[diverged] = 0.0
        x_next = sim.step(x, u, check=False)
        if noisy and d.kind == "transition":
            x_next = x_next + np.stack([r.uniform(-d.zeta, d.zeta, size=model.d_x) for r in rngs])
        with np.errstate(invalid="ignore", over="ignore"):
            bad = ~np.isfinite(x_next).all(-1) | (np.linalg.norm(x_next, axis=-1) > blowup)
        newly = bad & ~diverged
        diverged |= bad
        x_next[diverged] = x[diverged]
        us[:, t] = u
        xs[:, t + 1] = x_next
        if newly.any():
            xs[newly, t + 1:] = x[newly, None, :]
    results = []
    for i in range(M):
        cp = cost_params.with_goal(model.goal_state(goals[i]))
        if diverged[i]:
            cost = math.inf
        else:
            cost = float(running_cost(xs[i, :-1], us[i], cp)[0].sum() + terminal_cost(xs[i, -1], cp)[0])
        err = float(model.task_error(xs[i, -1], goals[i]))
        results.append(RolloutResult(xs[i], us[i], cost, err, bool(diverged[i])))
    return results


def rollout(W, model, x0, goal, T, d: DisturbanceSpec, rng, cost_params, blowup=1e3) -> RolloutResult:
    return rollout_batch(W, model, x0[None], np.asarray(goal)[None], T, d, [rng], cost_params, blowup)[0]


@dataclass
class PercentileCurve:
    percentiles: np.ndarray
    values: np.ndarray  # capped
    capped: np.ndarray  # bool per entry
    cap: float

    def value_at(self, p):
        """Right-continuous step: smallest sorted cost whose percentile is >= p."""
        n = len(self.values)
        k = max(1, math.ceil(p / 100.0 * n - 1e-9))
        return self.values[min(k, n) - 1]


def cost_percentile(costs, cap_multiplier=2.0, baseline_max=None):
    """Sorted costs against percentiles ``100 k / n``; values above the cap are clipped and flagged."""
    costs = np.asarray(costs, dtype=float)
    if costs.size == 0:
        raise ContractError("cost list is empty")
    s = np.sort(costs)
    n = s.size
    cap = math.inf if baseline_max is None else cap_multiplier * baseline_max
    capped = s > cap
    return PercentileCurve(100.0 * np.arange(1, n + 1) / n, np.where(capped, cap, s), capped, cap)


def task_error(result: RolloutResult, goal, model):
    return float(model.task_error(result.states[-1], goal))


@dataclass
class LipschitzEstimate:
    z: np.ndarray
    epsilon: float
    C: float
    m: int


def _ball_sample(rng, d, epsilon):
    v = rng.normal(size=d)
    v /= np.linalg.norm(v)
    return v * epsilon * rng.uniform() ** (1.0 / d)


def empirical_lipschitz(W: pn.MlpParams, z, epsilon, m, rng, refine_steps=20) -> LipschitzEstimate:
    """Max of ``|pi(z) - pi(z + delta)| / |delta|`` over ``m`` perturbations in the epsilon-ball.

    Even-indexed samples are uniform in the ball; odd-indexed ones are refined
    by normalised projected gradient ascent on ``|pi(z) - pi(z + delta)|^2``.
    Sample ``i`` only consumes randomness in order, so estimates are nested in
    ``m`` for a fixed seed.
    """
    if m < 1:
        raise ContractError("m must be >= 1")
    z = np.asarray(z, dtype=float)
    u0 = pn.forward(W, z)
    best = 0.0
    for i in range(m):
        delta = _ball_sample(rng, z.size, epsilon)
        if i % 2 == 1:
            for _ in range(refine_steps):
                e = u0 - pn.forward(W, z + delta)
                g = pn.grad_input(W, z + delta, -2.0 * e)
                gn = np.linalg.norm(g)
                if gn == 0:
                    break
                delta = project_ball(delta + 0.5 * epsilon * g / gn, epsilon)
        dn = np.linalg.norm(delta)
        if dn == 0:
            continue
        ratio = float(np.linalg.norm(u0 - pn.forward(W, z + delta)) / dn)
        best = max(best, ratio)
    return LipschitzEstimate(z, float(epsilon), best, m)


@dataclass
class BoundDiagnostic:
    gamma: float
    C_pi: float
    C_l_u: float
    C_f_u: float
    C_l_pi: float
    C_f_pi: float
    C_J: float
    zeta: float
    horizon: int
    radius: float
    empirical_discrepancy: float
    bound_value: float

    @property
    def holds(self):
        return self.empirical_discrepancy <= self.bound_value * (1 + 1e-12) + 1e-15


def _discounted_cost(A, B, K, Qc, Rc, x0, deltas, gamma):
    """Discounted truncated cost of ``u = K (x + delta_t)``, batched over leading axis of ``deltas``."""
    n, H, _ = deltas.shape
    x = np.broadcast_to(x0, (n, x0.size)).copy()
    total = np.zeros(n)
    for t in range(H):
        u = (x + deltas[:, t]) @ K.T
        total += gamma**t * (np.einsum("ni,ij,nj->n", x, Qc, x) + np.einsum("ni,ij,nj->n", u, Rc, u))
        x = x @ A.T + u @ B.T
    return total


def lemma2_bound_check(A, B, K, Qc, Rc, gamma, zeta, n_samples, rng, x0=None, horizon=None,
                       tail=1e-6) -> BoundDiagnostic:
    """Empirical value discrepancy under bounded input disturbances vs. the analytic bound.

    System ``x' = A x + B u``, policy ``pi(x) = K x``, stage cost
    ``x'Qx + u'Ru`` and discount ``gamma``. Quadratic costs are only locally
    Lipschitz, so all constants are taken over the ball of radius ``R`` that
    contains every nominal and disturbed state within the horizon. The
    discounted value is truncated at ``H`` with ``gamma^H <= tail``.
    """
    A, B, K = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, K))
    Qc, Rc = np.atleast_2d(Qc).astype(float), np.atleast_2d(Rc).astype(float)
    if not 0 < gamma < 1:
        raise ContractError("gamma must lie in (0, 1)")
    norm2 = lambda m: float(np.linalg.norm(m, 2))
    C_pi = norm2(K)
    C_f_u = norm2(B)
    C_f_pi = norm2(A + B @ K)
    if gamma * C_f_pi >= 1:
        raise ContractError(f"bound hypothesis violated: gamma*C_f_pi = {gamma * C_f_pi:.4g} >= 1")
    d_x = A.shape[0]
    x0 = np.zeros(d_x) if x0 is None else np.asarray(x0, dtype=float).reshape(d_x)
    H = horizon or max(1, math.ceil(math.log(tail) / math.log(gamma)))
    r, R = np.linalg.norm(x0), np.linalg.norm(x0)
    kick = norm2(B @ K) * zeta
    for _ in range(H):
        r = C_f_pi * r + kick
        R = max(R, r)
    C_l_pi = 2.0 * norm2(Qc + K.T @ Rc @ K) * R
    C_l_u = 2.0 * norm2(Rc) * C_pi * (R + zeta)
    C_J = C_l_pi / (1.0 - gamma * C_f_pi)
    bound = C_pi * (C_l_u + gamma * C_J * C_f_u) / (1.0 - gamma) * zeta
    if zeta == 0 or C_pi == 0:
        emp = 0.0
    else:
        raw = rng.normal(size=(n_samples, H, d_x))
        dirs = raw / np.linalg.norm(raw, axis=-1, keepdims=True)
        radii = zeta * rng.uniform(size=(n_samples, H, 1)) ** (1.0 / d_x)
        # half the sequences sit on the sphere (largest admissible disturbances)
        radii[: n_samples // 2] = zeta
        deltas = dirs * radii
        nominal = _discounted_cost(A, B, K, Qc, Rc, x0, np.zeros((1, H, d_x)), gamma)[0]
        disturbed = _discounted_cost(A, B, K, Qc, Rc, x0, deltas, gamma)
        emp = float(np.abs(disturbed - nominal).max())
    return BoundDiagnostic(gamma, C_pi, C_l_u, C_f_u, C_l_pi, C_f_pi, C_J, zeta, H, float(R), emp, float(bound))
