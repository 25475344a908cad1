"""Adversarial discrepancy, inner maximisation and policy-gradient estimators.

A batch is a pair ``(Z, U)`` of policy inputs ``(B, d_z)`` and target controls
``(B, d_u)``. Losses are normalised by ``n_traj``: the behavioural-cloning loss
is ``(1/n_traj) sum_b |pi(z_b) - u_b|^2`` and the regulariser is
``(alpha/n_traj) sum_b r(z_b, W, delta_b)``. Passing ``n_traj=None`` uses the
batch size, i.e. a per-sample mean.

Four estimators are provided:

* ``none``      plain behavioural cloning
* ``gaussian``  cloning on inputs perturbed by isotropic Gaussian noise
* ``ar``        leader-only gradient with the final perturbation held fixed
* ``sar``       leader gradient plus the leader-follower interaction term, i.e.
                the total derivative through the unrolled ascent steps
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import policy_net as pn
from .errors import ContractError, TrainingFailure

log = logging.getLogger(__name__)

REGULARIZERS = ("none", "gaussian", "ar", "sar")


@dataclass
class PerturbationConfig:
    epsilon: float = 5e-3
    sigma: float | None = None  # init std of delta^0; defaults to epsilon / 2
    K: int = 1
    eta_delta: float = 5e-3
    alpha: float = 1.0
    eta_W: float = 1e-3
    sigma_g: float | None = None  # Gaussian-baseline std; defaults to epsilon
    state_only: bool = False  # restrict perturbation to the first d_state inputs
    d_state: int | None = None

    def __post_init__(self):
        if self.epsilon < 0 or self.K < 0 or self.alpha < 0:
            raise ContractError("epsilon, K and alpha must be nonnegative")
        if self.eta_delta <= 0 or self.eta_W <= 0:
            raise ContractError("step sizes must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise ContractError("sigma must be nonnegative")
        if self.state_only and self.d_state is None:
            raise ContractError("state_only requires d_state")

    @property
    def init_std(self):
        return self.epsilon / 2.0 if self.sigma is None else self.sigma

    @property
    def gaussian_std(self):
        return self.epsilon if self.sigma_g is None else self.sigma_g

    def mask(self, d_z):
        m = np.ones(d_z)
        if self.state_only:
            m[self.d_state:] = 0.0
        return m


@dataclass
class PerturbationTape:
    """Inner-maximisation history for a batch.

    ``delta_steps[k]`` is delta^k (``k = 0..K``); for each ascent step the
    pre-projection candidate, the ascent direction and whether the projection
    was active are recorded.
    """

    delta_steps: list = field(default_factory=list)
    candidates: list = field(default_factory=list)
    grads: list = field(default_factory=list)
    active: list = field(default_factory=list)

    @property
    def K(self):
        return len(self.candidates)

    @property
    def final(self):
        return self.delta_steps[-1]


def project_ball(delta, epsilon):
    """Project rows of ``delta`` onto the l2 ball of radius ``epsilon``."""
    if epsilon < 0:
        raise ContractError("epsilon must be nonnegative")
    delta = np.asarray(delta, dtype=np.float64)
    norm = np.linalg.norm(delta, axis=-1, keepdims=True)
    outside = norm > epsilon
    scale = np.where(outside, epsilon / np.where(outside, norm, 1.0), 1.0)
    return delta * scale


def discrepancy(z, W: pn.MlpParams, delta):
    """``r = |pi(z) - pi(z + delta)|^2`` (per row for batched input)."""
    z = np.asarray(z, dtype=np.float64)
    e = pn.forward(W, z) - pn.forward(W, z + delta)
    return (e**2).sum(-1)


def _ascent_direction(W, z, delta, u_clean=None):
    """grad_delta r at ``delta``."""
    if u_clean is None:
        u_clean = pn.forward(W, z)
    e = u_clean - pn.forward(W, z + delta)
    return pn.grad_input(W, z + delta, -2.0 * e)


def inner_maximize(z, W: pn.MlpParams, cfg: PerturbationConfig, rng, delta0=None) -> PerturbationTape:
    """K steps of projected gradient ascent on ``r`` from ``delta^0 ~ N(0, sigma^2 I)``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    mask = cfg.mask(z.shape[-1])
    if delta0 is None:
        delta0 = rng.normal(0.0, cfg.init_std, size=z.shape) * mask
    tape = PerturbationTape(delta_steps=[np.asarray(delta0, dtype=np.float64)])
    u_clean = pn.forward(W, z)
    delta = tape.delta_steps[0]
    for _ in range(cfg.K):
        g = _ascent_direction(W, z, delta, u_clean) * mask
        cand = delta + cfg.eta_delta * g
        norm = np.linalg.norm(cand, axis=-1)
        tape.grads.append(g)
        tape.candidates.append(cand)
        tape.active.append(norm > cfg.epsilon)
        delta = project_ball(cand, cfg.epsilon)
        tape.delta_steps.append(delta)
    return tape


def bc_loss(batch, W: pn.MlpParams, n_traj=None):
    Z, U = batch
    Z = np.atleast_2d(Z)
    if Z.shape[0] == 0:
        raise ContractError("empty batch")
    n = Z.shape[0] if n_traj is None else n_traj
    res = pn.forward(W, Z) - np.atleast_2d(U)
    return float((res**2).sum() / n)


def _leader(batch, W, cfg, delta, n):
    """Gradient of BC + (alpha/n) sum r with ``delta`` held constant; also returns loss values."""
    Z, U = batch
    u = pn.forward(W, Z)
    res = u - U
    bc = (res**2).sum() / n
    if delta is None or cfg.alpha == 0:
        return pn.grad_params(W, Z, (2.0 / n) * res), bc, 0.0
    u_pert = pn.forward(W, Z + delta)
    e = u - u_pert
    reg = cfg.alpha * (e**2).sum() / n
    g_clean = pn.grad_params(W, Z, (2.0 / n) * res + (2.0 * cfg.alpha / n) * e)
    g_pert = pn.grad_params(W, Z + delta, (-2.0 * cfg.alpha / n) * e)
    return g_clean + g_pert, bc, reg


def interaction_term(batch, W: pn.MlpParams, cfg: PerturbationConfig, tape: PerturbationTape, n):
    """``(alpha/n) sum (d r / d delta^K)(d delta^K / d W)`` by reverse accumulation over the tape."""
    Z, _ = batch
    mask = cfg.mask(Z.shape[-1])
    u_clean = pn.forward(W, Z)
    dK = tape.final
    e = u_clean - pn.forward(W, Z + dK)
    adj = pn.grad_input(W, Z + dK, -2.0 * e) * (cfg.alpha / n)
    total = np.zeros_like(W.flat)
    for k in range(tape.K, 0, -1):
        cand = tape.candidates[k - 1]
        active = tape.active[k - 1]
        if np.any(active):
            norm = np.linalg.norm(cand, axis=-1, keepdims=True)
            vhat = cand / np.where(norm > 0, norm, 1.0)
            proj = (cfg.epsilon / np.where(norm > 0, norm, 1.0)) * (adj - vhat * (vhat * adj).sum(-1, keepdims=True))
            adj = np.where(active[:, None], proj, adj)
        # candidate = delta^{k-1} + eta * grad_delta r(delta^{k-1}); contract with adj
        w = cfg.eta_delta * adj * mask
        delta = tape.delta_steps[k - 1]
        y = Z + delta
        u_y, ud = pn.jvp(W, y, w)
        e = u_clean - u_y
        g_clean = pn.grad_params(W, Z, -2.0 * ud)
        g_y, g_delta = pn.second_order_vjp(W, y, w, 2.0 * ud, -2.0 * e)
        total += g_clean + g_y
        adj = adj + g_delta * mask
    return total


def ar_policy_gradient(batch, W, cfg: PerturbationConfig, rng=None, n_traj=None, tape=None):
    """Conventional adversarial-regularisation gradient (leader term only)."""
    Z = np.atleast_2d(batch[0])
    n = Z.shape[0] if n_traj is None else n_traj
    if tape is None:
        tape = inner_maximize(Z, W, cfg, rng)
    return _leader((Z, np.atleast_2d(batch[1])), W, cfg, tape.final, n)[0]


def sar_policy_gradient(batch, W, cfg: PerturbationConfig, rng=None, n_traj=None, tape=None,
                        return_parts=False):
    """Stackelberg gradient: leader term plus leader-follower interaction.

    With ``return_parts`` returns ``(total, leader, interaction)``; ``leader`` is
    computed by the same code path as :func:`ar_policy_gradient`.
    """
    Z = np.atleast_2d(batch[0])
    batch = (Z, np.atleast_2d(batch[1]))
    n = Z.shape[0] if n_traj is None else n_traj
    if tape is None:
        tape = inner_maximize(Z, W, cfg, rng)
    leader = _leader(batch, W, cfg, tape.final, n)[0]
    if cfg.alpha == 0 or tape.K == 0:
        inter = np.zeros_like(leader)
    else:
        inter = interaction_term(batch, W, cfg, tape, n)
    total = leader + inter
    return (total, leader, inter) if return_parts else total


def gaussian_baseline_batch(batch, sigma_g, rng):
    """Inputs perturbed by ``N(0, sigma_g^2 I)``; targets unchanged."""
    if sigma_g < 0:
        raise ContractError("sigma_g must be nonnegative")
    Z, U = batch
    Z = np.asarray(Z, dtype=np.float64)
    if sigma_g == 0:
        return Z.copy(), np.asarray(U).copy()
    return Z + rng.normal(0.0, sigma_g, size=Z.shape), np.asarray(U).copy()


def objective_gradient(batch, W, cfg, kind, rng, n_traj=None):
    """Gradient and loss values ``(grad, bc, reg)`` for regulariser ``kind``."""
    Z, U = np.atleast_2d(batch[0]), np.atleast_2d(batch[1])
    n = Z.shape[0] if n_traj is None else n_traj
    if kind == "none":
        return _leader((Z, U), W, cfg, None, n)
    if kind == "gaussian":
        Zg, Ug = gaussian_baseline_batch((Z, U), cfg.gaussian_std * 1.0, rng)
        mask = cfg.mask(Z.shape[-1])
        Zg = Z + (Zg - Z) * mask
        return _leader((Zg, Ug), W, cfg, None, n)
    if kind not in ("ar", "sar"):
        raise ContractError(f"unknown regulariser {kind!r}; expected one of {REGULARIZERS}")
    tape = inner_maximize(Z, W, cfg, rng)
    grad, bc, reg = _leader((Z, U), W, cfg, tape.final, n)
    if kind == "sar" and cfg.alpha != 0 and tape.K > 0:
        grad = grad + interaction_term((Z, U), W, cfg, tape, n)
    return grad, bc, reg


@dataclass
class TrainSettings:
    epochs: int = 300
    batch_size: int = 256
    lr: float | None = None  # defaults to cfg.eta_W
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    normalization: str = "trajectory"  # or "sample"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.normalization not in ("trajectory", "sample"):
            raise ContractError("normalization must be 'trajectory' or 'sample'")


@dataclass
class TrainResult:
    params: pn.MlpParams
    history: list
    initial_bc: float
    final_bc: float


class AdamW:
    """Adam with decoupled weight decay on a flat parameter vector."""

    def __init__(self, n, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        theta = theta * (1.0 - self.lr * self.wd)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train_policy(dataset, W0: pn.MlpParams, cfg: PerturbationConfig, kind="sar",
                 settings: TrainSettings | None = None, rng=None, n_traj=None):
    """Minibatch training with AdamW, one pass over the data per epoch.

    ``dataset`` is ``(Z, U)``. ``n_traj`` is the number of trajectories behind the
    dataset (used by the ``trajectory`` normalisation). The returned parameters
    are the uniform average of the end-of-epoch snapshots over the last quarter
    of epochs. Raises TrainingFailure on a non-finite loss.
    """
    settings = settings or TrainSettings()
    if kind not in REGULARIZERS:
        raise ContractError(f"unknown regulariser {kind!r}; expected one of {REGULARIZERS}")
    rng = rng if rng is not None else np.random.default_rng(0)
    Z, U = np.atleast_2d(dataset[0]), np.atleast_2d(dataset[1])
    n_total = Z.shape[0]
    if n_total == 0:
        raise ContractError("empty dataset")
    n_norm = float(n_traj if (n_traj and settings.normalization == "trajectory") else n_total)
    initial_bc = bc_loss((Z, U), W0, n_norm)
    W = W0.copy()
    if settings.epochs == 0:
        return TrainResult(W, [], initial_bc, initial_bc)
    opt = AdamW(W.flat.size, settings.lr or cfg.eta_W, settings.betas, settings.adam_eps, settings.weight_decay)
    n_avg = max(1, settings.epochs // 4)
    avg = np.zeros_like(W.flat)
    history = []
    bs = min(settings.batch_size, n_total)
    for epoch in range(settings.epochs):
        order = rng.permutation(n_total)
        reg_sum = gnorm_sum = 0.0
        n_batches = 0
        for start in range(0, n_total, bs):
            idx = order[start: start + bs]
            # unbiased minibatch estimate of the full normalised objective
            n_eff = n_norm * len(idx) / n_total
            with np.errstate(over="ignore", invalid="ignore"):
                grad, bc, reg = objective_gradient((Z[idx], U[idx]), W, cfg, kind, rng, n_eff)
                gnorm = float(np.linalg.norm(grad))
            if not (np.isfinite(bc) and np.isfinite(gnorm)):
                raise TrainingFailure(f"non-finite loss at epoch {epoch}", W, history)
            if settings.grad_clip is not None and gnorm > settings.grad_clip:
                grad = grad * (settings.grad_clip / gnorm)
            last_good = W
            W = W.with_flat(opt.step(W.flat, grad))
            reg_sum += reg * len(idx) / n_total
            gnorm_sum += gnorm
            n_batches += 1
        with np.errstate(over="ignore", invalid="ignore"):
            q_bc = bc_loss((Z, U), W, n_norm)
        if not np.isfinite(q_bc):
            raise TrainingFailure(f"non-finite loss at epoch {epoch}", last_good, history)
        history.append({"epoch": epoch + 1, "q_bc": q_bc, "reg": reg_sum,
                        "grad_norm": gnorm_sum / n_batches})
        if epoch >= settings.epochs - n_avg:
            avg += W.flat
    W = W.with_flat(avg / n_avg)
    return TrainResult(W, history, initial_bc, bc_loss((Z, U), W, n_norm))
