"""Run configuration: YAML file -> validated nested dataclasses.

Unknown keys are rejected with the dotted path of the offending key; ``seed``
is mandatory. :func:`config_hash` fingerprints the validated configuration and
is stamped into every artefact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError


@dataclass
class ModelConfig:
    kind: str = "cartpole"
    params: dict = field(default_factory=dict)


@dataclass
class CostConfig:
    Q: list | None = None  # diagonal or full matrix; model default when None
    R: list | None = None
    Q_f: list | None = None  # defaults to terminal_scale * Q
    terminal_scale: float = 1.0


@dataclass
class DdpConfig:
    max_iters: int = 200
    cost_tolerance: float = 1e-9
    mu_init: float = 0.0
    mu_max: float = 1e10
    line_search: list = field(default_factory=lambda: [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625])
    u_limit: float | None = None


@dataclass
class AdmmConfig:
    max_iterations: int = 15
    patience: int = 2
    rho_x: float = 10.0
    rho_u: float = 1.0
    pl_steps: int = 50
    pl_step_size: float = 1e-2


@dataclass
class PolicyConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"


@dataclass
class TrainingConfig:
    regularizer: str = "sar"
    epochs: int = 300
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-2
    grad_clip: float | None = None
    normalization: str = "trajectory"


@dataclass
class PerturbationSection:
    epsilon: float = 5e-3
    sigma: float | None = None
    K: int = 1
    eta_delta: float = 5e-3
    alpha: float = 1.0
    sigma_g: float | None = None
    state_only: bool = False


@dataclass
class DatasetConfig:
    N: int = 16
    T: int = 100
    x0_low: list = field(default_factory=list)
    x0_high: list = field(default_factory=list)
    goal_low: list = field(default_factory=list)
    goal_high: list = field(default_factory=list)


@dataclass
class DisturbanceConfig:
    kind: str = "none"
    zeta: float = 0.0
    delta_mass: float = 0.0


@dataclass
class EvalConfig:
    M: int = 100
    T: int | None = None  # defaults to dataset.T
    cap_multiplier: float = 2.0
    disturbances: list = field(default_factory=lambda: [DisturbanceConfig()])
    lipschitz_points: int = 100
    lipschitz_samples: int = 20
    lipschitz_epsilon: float | None = None  # defaults to perturbation.epsilon
    epsilon_sweep: list = field(default_factory=lambda: [0.0, 0.005, 0.01, 0.025, 0.05])
    blowup: float = 1e3


@dataclass
class RunConfig:
    seed: int
    model: ModelConfig = field(default_factory=ModelConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    ddp: DdpConfig = field(default_factory=DdpConfig)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    perturbation: PerturbationSection = field(default_factory=PerturbationSection)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_NESTED = {
    "model": ModelConfig, "cost": CostConfig, "ddp": DdpConfig, "admm": AdmmConfig,
    "policy": PolicyConfig, "training": TrainingConfig, "perturbation": PerturbationSection,
    "dataset": DatasetConfig, "eval": EvalConfig,
}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"'{path or 'config'}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key '{where}'")
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if cls is RunConfig and key in _NESTED:
            value = _build(_NESTED[key], value or {}, where)
        elif cls is EvalConfig and key == "disturbances":
            if not isinstance(value, list):
                raise ConfigError(f"'{where}' must be a list")
            value = [_build(DisturbanceConfig, v, f"{where}[{i}]") for i, v in enumerate(value)]
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"'{path or 'config'}': {exc}") from exc


def from_dict(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    if "seed" not in data:
        raise ConfigError("missing required key 'seed'")
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    return from_dict(data or {})


def to_dict(cfg: RunConfig):
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _check(cond, key, msg):
    if not cond:
        raise ConfigError(f"'{key}': {msg}")


def validate(cfg: RunConfig):
    from .advreg import REGULARIZERS
    from .evaluation import DISTURBANCES

    _check(isinstance(cfg.seed, int) and not isinstance(cfg.seed, bool), "seed", "must be an integer")
    _check(cfg.model.kind in ("cartpole", "arm"), "model.kind", "must be 'cartpole' or 'arm'")
    _check(cfg.training.regularizer in REGULARIZERS, "training.regularizer", f"must be one of {REGULARIZERS}")
    _check(cfg.training.normalization in ("trajectory", "sample"), "training.normalization",
           "must be 'trajectory' or 'sample'")
    _check(cfg.dataset.N >= 1, "dataset.N", "must be >= 1")
    _check(cfg.dataset.T >= 1, "dataset.T", "must be >= 1")
    _check(cfg.admm.max_iterations >= 1, "admm.max_iterations", "must be >= 1")
    _check(cfg.eval.M >= 1, "eval.M", "must be >= 1")
    _check(cfg.perturbation.epsilon >= 0, "perturbation.epsilon", "must be >= 0")
    _check(cfg.perturbation.K >= 0, "perturbation.K", "must be >= 0")
    _check(cfg.policy.activation == "tanh", "policy.activation", "only 'tanh' is supported")
    for i, d in enumerate(cfg.eval.disturbances):
        _check(d.kind in DISTURBANCES, f"eval.disturbances[{i}].kind", f"must be one of {DISTURBANCES}")
        _check(d.zeta >= 0, f"eval.disturbances[{i}].zeta", "must be >= 0")
    model = build_model(cfg)
    for key, dim in (("x0_low", model.d_x), ("x0_high", model.d_x),
                     ("goal_low", model.d_goal), ("goal_high", model.d_goal)):
        val = getattr(cfg.dataset, key)
        _check(len(val) == dim, f"dataset.{key}", f"needs {dim} entries, got {len(val)}")
    lo, hi = np.array(cfg.dataset.x0_low, float), np.array(cfg.dataset.x0_high, float)
    _check(np.all(lo <= hi), "dataset.x0_low", "must not exceed x0_high")
    lo, hi = np.array(cfg.dataset.goal_low, float), np.array(cfg.dataset.goal_high, float)
    _check(np.all(lo <= hi), "dataset.goal_low", "must not exceed goal_high")
    build_cost(cfg, model)


def build_model(cfg: RunConfig):
    from .envs import CartPole, CartPoleParams, PlanarArm, PlanarArmParams
    from .errors import ParameterError

    try:
        if cfg.model.kind == "cartpole":
            return CartPole(CartPoleParams(**cfg.model.params))
        return PlanarArm(PlanarArmParams(**cfg.model.params))
    except TypeError as exc:
        raise ConfigError(f"'model.params': {exc}") from exc
    except ParameterError as exc:
        raise ConfigError(f"'model.params': {exc}") from exc


def _matrix(val, n, key):
    arr = np.asarray(val, dtype=float)
    if arr.ndim == 1:
        _check(arr.size == n, key, f"diagonal needs {n} entries")
        return np.diag(arr)
    _check(arr.shape == (n, n), key, f"matrix must be {n}x{n}")
    return arr


def build_cost(cfg: RunConfig, model):
    from .costs import QuadraticCostParams, default_cost_params
    from .errors import ContractError

    base = default_cost_params(model)
    Q = base.Q if cfg.cost.Q is None else _matrix(cfg.cost.Q, model.d_x, "cost.Q")
    R = base.R if cfg.cost.R is None else _matrix(cfg.cost.R, model.d_u, "cost.R")
    Q_f = cfg.cost.terminal_scale * Q if cfg.cost.Q_f is None else _matrix(cfg.cost.Q_f, model.d_x, "cost.Q_f")
    try:
        return QuadraticCostParams(Q, R, np.zeros(model.d_x), Q_f)
    except ContractError as exc:
        raise ConfigError(f"'cost': {exc}") from exc


def model_hash(cfg: RunConfig) -> str:
    blob = json.dumps({"kind": cfg.model.kind, "params": cfg.model.params}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_perturbation(cfg: RunConfig, model, epsilon=None):
    from .advreg import PerturbationConfig

    p = cfg.perturbation
    return PerturbationConfig(
        epsilon=p.epsilon if epsilon is None else epsilon, sigma=p.sigma, K=p.K,
        eta_delta=p.eta_delta, alpha=p.alpha, eta_W=cfg.training.lr, sigma_g=p.sigma_g,
        state_only=p.state_only, d_state=model.d_x)


def build_train_settings(cfg: RunConfig):
    from .advreg import TrainSettings

    t = cfg.training
    return TrainSettings(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, weight_decay=t.weight_decay,
                         grad_clip=t.grad_clip, normalization=t.normalization)


def build_ddp_settings(cfg: RunConfig):
    from .ddp import DdpSettings

    d = cfg.ddp
    return DdpSettings(max_iters=d.max_iters, cost_tolerance=d.cost_tolerance, mu_init=d.mu_init,
                       mu_max=d.mu_max, line_search=tuple(d.line_search), u_limit=d.u_limit)


def build_admm_settings(cfg: RunConfig):
    from .admm import AdmmSettings

    a = cfg.admm
    return AdmmSettings(max_iterations=a.max_iterations, patience=a.patience, rho_x=a.rho_x, rho_u=a.rho_u,
                        pl_steps=a.pl_steps, pl_step_size=a.pl_step_size, policy_epochs=cfg.training.epochs)


def layer_dims(cfg: RunConfig, model):
    return (model.d_x + model.d_goal, *cfg.policy.hidden, model.d_u)
