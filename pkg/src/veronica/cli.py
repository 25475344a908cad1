"""Command-line entry point: ``veronica {gen-init,train,eval,report}``.

Exit codes: 0 success, 1 configuration error, 2 training failure,
3 incompatible input files.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import io
from . import policy_net as pn
from .admm import run_admm
from .ddp import solve_ddp
from .errors import ConfigError, ContractError, IncompatibleError, TrainingFailure
from .evaluation import DisturbanceSpec, cost_percentile, empirical_lipschitz, rollout_batch

log = logging.getLogger("veronica")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_INCOMPATIBLE = 0, 1, 2, 3

# independent RNG streams derived from the master seed
STREAM_INIT, STREAM_POLICY_INIT, STREAM_EVAL_INIT, STREAM_ROLLOUT, STREAM_LIPSCHITZ = range(5)


def training_hash(cfg: C.RunConfig) -> str:
    """Hash of everything that influences training (the eval section is excluded)."""
    d = C.to_dict(cfg)
    d.pop("eval")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def sample_inits(cfg: C.RunConfig, n, stream):
    rng = np.random.default_rng([cfg.seed, stream])
    ds = cfg.dataset
    x0 = rng.uniform(np.array(ds.x0_low, float), np.array(ds.x0_high, float), size=(n, len(ds.x0_low)))
    goals = rng.uniform(np.array(ds.goal_low, float), np.array(ds.goal_high, float),
                        size=(n, len(ds.goal_low)))
    return x0, goals


def gen_init(cfg: C.RunConfig, out):
    x0, goals = sample_inits(cfg, cfg.dataset.N, STREAM_INIT)
    io.write_init_file(out, x0, goals, cfg.model.kind, C.config_hash(cfg))
    return x0, goals


def _load_inits(path, cfg, model):
    x0, goals, meta = io.read_init_file(path)
    if meta["kind"] != cfg.model.kind or x0.shape[1] != model.d_x or goals.shape[1] != model.d_goal:
        raise IncompatibleError(f"{path}: initial conditions are for model '{meta['kind']}' "
                                f"with d_x={x0.shape[1]}, config expects '{cfg.model.kind}' d_x={model.d_x}")
    return x0, goals


ADMM_FIELDS = ["iteration", "q_bc", "q_bc_to", "primal_residual_x", "primal_residual_u", "ddp_failures"]
EPOCH_FIELDS = ["iteration", "epoch", "q_bc", "reg", "grad_norm"]


def train(cfg: C.RunConfig, x0, goals, out_dir, epsilon=None):
    """Run ADMM and write checkpoints, the TO dataset and the history CSVs.

    Returns the final policy parameters.
    """
    out_dir = Path(out_dir)
    model = C.build_model(cfg)
    cost = C.build_cost(cfg, model)
    chash, thash, mhash = C.config_hash(cfg), training_hash(cfg), C.model_hash(cfg)
    dims = C.layer_dims(cfg, model)
    W0 = pn.init(dims, int(np.random.default_rng([cfg.seed, STREAM_POLICY_INIT]).integers(2**31)))
    pert = C.build_perturbation(cfg, model, epsilon)
    meta = {"config_hash": chash, "training_hash": thash, "model_hash": mhash}

    def on_iteration(record, W):
        io.save_checkpoint(out_dir / f"checkpoint_iter{record['iteration']:03d}.bin", W,
                           {**meta, "iteration": record["iteration"], "q_bc": record["q_bc"]})

    res = run_admm(x0, goals, model, cost, cfg.dataset.T, W0, C.build_admm_settings(cfg), pert,
                   cfg.training.regularizer, C.build_train_settings(cfg), C.build_ddp_settings(cfg),
                   seed=cfg.seed, on_iteration=on_iteration)
    io.write_csv(out_dir / "admm_history.csv", ADMM_FIELDS, res.history, chash)
    io.write_csv(out_dir / "epoch_history.csv", EPOCH_FIELDS, res.state.epoch_history, chash)
    st = res.state
    io.save_dataset(out_dir / "dataset.bin", st.x0, st.goals, st.X_TO, st.U_TO, meta)
    best = next(r for r in res.history if r["iteration"] == res.best_iteration)
    io.save_checkpoint(out_dir / "policy.bin", res.params,
                       {**meta, "iteration": res.best_iteration, "q_bc": best["q_bc"]})
    return res.params


def _disturbances(cfg):
    return [DisturbanceSpec(d.kind, d.zeta, d.delta_mass) for d in cfg.eval.disturbances]


def evaluate(cfg: C.RunConfig, W: pn.MlpParams, out_dir, x0=None, goals=None, tag=""):
    """Roll out ``W`` for every configured disturbance and write the report CSVs."""
    out_dir = Path(out_dir)
    model = C.build_model(cfg)
    cost = C.build_cost(cfg, model)
    chash = C.config_hash(cfg)
    T = cfg.eval.T or cfg.dataset.T
    if x0 is None:
        x0, goals = sample_inits(cfg, cfg.eval.M, STREAM_EVAL_INIT)
    M = x0.shape[0]
    ddp_settings = C.build_ddp_settings(cfg)
    baseline = np.array([
        solve_ddp(x0[i], model, cost.with_goal(model.goal_state(goals[i])), None, ddp_settings, T=T).cost
        for i in range(M)])
    rows, curve_rows = [], []
    for d in _disturbances(cfg):
        rngs = [np.random.default_rng([cfg.seed, STREAM_ROLLOUT, i]) for i in range(M)]
        results = rollout_batch(W, model, x0, goals, T, d, rngs, cost, cfg.eval.blowup)
        for i, r in enumerate(results):
            rows.append({"disturbance": d.label, "rollout": i, "seed": cfg.seed, "cost": r.cost,
                         "baseline_cost": baseline[i], "task_error": r.task_error,
                         "diverged": r.diverged})
        curve = cost_percentile([r.cost for r in results], cfg.eval.cap_multiplier, baseline.max())
        for p, v, c in zip(curve.percentiles, curve.values, curve.capped):
            curve_rows.append({"disturbance": d.label, "percentile": p, "cost": v, "capped": c})
    io.write_csv(out_dir / f"rollouts{tag}.csv",
                 ["disturbance", "rollout", "seed", "cost", "baseline_cost", "task_error", "diverged"], rows, chash)
    io.write_csv(out_dir / f"percentiles{tag}.csv", ["disturbance", "percentile", "cost", "capped"],
                 curve_rows, chash)
    # local Lipschitz estimates at states visited by the undisturbed rollouts
    eps = cfg.eval.lipschitz_epsilon or cfg.perturbation.epsilon or 1e-2
    rngs = [np.random.default_rng([cfg.seed, STREAM_ROLLOUT, i]) for i in range(M)]
    nominal = rollout_batch(W, model, x0, goals, T, DisturbanceSpec(), rngs, cost, cfg.eval.blowup)
    Z = np.concatenate([np.concatenate([r.states[:-1], np.broadcast_to(goals[i], (T, goals.shape[1]))], 1)
                        for i, r in enumerate(nominal)])
    pick = np.random.default_rng([cfg.seed, STREAM_LIPSCHITZ]).choice(
        Z.shape[0], size=min(cfg.eval.lipschitz_points, Z.shape[0]), replace=False)
    lip_rows = []
    for j, k in enumerate(pick):
        est = empirical_lipschitz(W, Z[k], eps, cfg.eval.lipschitz_samples,
                                  np.random.default_rng([cfg.seed, STREAM_LIPSCHITZ, j]))
        lip_rows.append({"point": j, "epsilon": eps, "lipschitz": est.C})
    io.write_csv(out_dir / f"lipschitz{tag}.csv", ["point", "epsilon", "lipschitz"], lip_rows, chash)
    return rows, curve_rows, lip_rows


def report(paths, out):
    """Merge percentile CSVs into one wide table: one column per (file, disturbance)."""
    table, hashes = {}, set()
    for path in paths:
        rows, h = io.read_csv(path)
        hashes.add(h)
        for r in rows:
            col = f"{Path(path).stem}:{r['disturbance']}"
            table.setdefault(float(r["percentile"]), {})[col] = r["cost"]
    cols = sorted({c for v in table.values() for c in v})
    out_rows = [{"percentile": p, **{c: table[p].get(c, "") for c in cols}} for p in sorted(table)]
    io.write_csv(out, ["percentile", *cols], out_rows, ",".join(sorted(h or "none" for h in hashes)))
    return out_rows


def _parser():
    p = argparse.ArgumentParser(prog="veronica", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-init", help="sample initial conditions and goals")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run ADMM training")
    t.add_argument("--config", required=True)
    t.add_argument("--init", required=True, help="initial-condition file from gen-init")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--regularizer", choices=["none", "gaussian", "ar", "sar"],
                   help="override training.regularizer")

    e = sub.add_parser("eval", help="evaluate a checkpoint under disturbances")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", help="policy checkpoint (not used with --epsilon-sweep)")
    e.add_argument("--init", help="held-out initial conditions; sampled from the config when omitted")
    e.add_argument("--train-init", help="training initial conditions (required with --epsilon-sweep)")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--epsilon-sweep", action="store_true",
                   help="retrain and evaluate for every epsilon in eval.epsilon_sweep")
    e.add_argument("--regularizer", choices=["none", "gaussian", "ar", "sar"],
                   help="override training.regularizer (must match the checkpoint)")

    r = sub.add_parser("report", help="merge percentile CSVs into one table")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out", required=True)
    return p


def _with_regularizer(cfg, kind):
    if kind is None:
        return cfg
    return dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, regularizer=kind))


def run(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        report(args.inputs, args.out)
        return EXIT_OK
    cfg = C.load_config(args.config)
    model = C.build_model(cfg)
    if args.command == "gen-init":
        gen_init(cfg, args.out)
    elif args.command == "train":
        cfg = _with_regularizer(cfg, args.regularizer)
        x0, goals = _load_inits(args.init, cfg, model)
        train(cfg, x0, goals, args.out_dir)
    elif args.command == "eval":
        cfg = _with_regularizer(cfg, args.regularizer)
        x0 = goals = None
        if args.init:
            x0, goals = _load_inits(args.init, cfg, model)
        if args.epsilon_sweep:
            if not args.train_init:
                raise ConfigError("--epsilon-sweep needs --train-init")
            tx0, tgoals = _load_inits(args.train_init, cfg, model)
            for eps in cfg.eval.epsilon_sweep:
                sub = Path(args.out_dir) / f"eps_{eps:g}"
                W = train(cfg, tx0, tgoals, sub, epsilon=eps)
                evaluate(cfg, W, args.out_dir, x0, goals, tag=f"_eps_{eps:g}")
        else:
            if not args.checkpoint:
                raise ConfigError("eval needs --checkpoint")
            W, meta = io.load_checkpoint(args.checkpoint)
            io.check_compatible(meta, model_hash=C.model_hash(cfg), layer_dims=C.layer_dims(cfg, model))
            if meta.get("training_hash") not in (None, training_hash(cfg)):
                raise IncompatibleError(f"checkpoint was trained with a different configuration "
                                        f"(training hash {meta['training_hash']} vs {training_hash(cfg)})")
            evaluate(cfg, W, args.out_dir, x0, goals)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompatibleError as exc:
        print(f"incompatible input: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except TrainingFailure as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
