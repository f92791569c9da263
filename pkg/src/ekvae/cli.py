"""Command-line entry points for reproducible runs.

Every command is a pure function of (config, seed, input files); outputs land
in a config-hash-addressed directory so re-runs are byte-identical and never
collide. Exit codes: 0 ok, 2 config/usage error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import control, evaluation, model as mdl, pendulum, training

CONFIG_DEFAULTS = {
    "version": 1,
    "seed": 0,
    "dataset": None,
    "out_root": "runs",
    "trainer": "co",  # co | anneal
    "mode": "smoother",  # smoother | filter
    "batch_size": 500,
    "epochs": 300,
    "lr": 1e-3,
    "nu": 300.0,
    "tau1": 10.0,
    "tau2": 0.01,
    "alpha_ema": 0.9,
    "d0_override": None,
    "ramp_frac": 0.5,
    "disentangled": False,
    "warm_start_steps": 0,
    "q_floor_stages": [],  # [epoch_fraction, floor] pairs
    "select_best": False,
    "model": {},
}

_FIELD_TYPES = {
    "version": int, "seed": int, "dataset": str, "out_root": str,
    "trainer": str, "mode": str, "batch_size": int, "epochs": int,
    "lr": float, "nu": float, "tau1": float, "tau2": float,
    "alpha_ema": float, "d0_override": float, "ramp_frac": float,
    "disentangled": bool, "warm_start_steps": int, "q_floor_stages": list,
    "select_best": bool, "model": dict,
}


class ConfigError(Exception):
    pass


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        for k, v in user.items():
            if k not in CONFIG_DEFAULTS:
                raise ConfigError(f"unknown config field: {k!r}")
            cfg[k] = v
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    for k, v in cfg.items():
        if v is None:
            continue
        want = _FIELD_TYPES[k]
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            cfg[k] = float(v)
        elif not isinstance(v, want) or (want is int and isinstance(v, bool)):
            raise ConfigError(f"config field {k!r} must be {want.__name__}, "
                              f"got {type(v).__name__}")
    if cfg["trainer"] not in ("co", "anneal"):
        raise ConfigError(f"config field 'trainer' must be 'co' or 'anneal', "
                          f"got {cfg['trainer']!r}")
    if cfg["mode"] not in ("smoother", "filter"):
        raise ConfigError(f"config field 'mode' must be 'smoother' or "
                          f"'filter', got {cfg['mode']!r}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def run_dir(cfg: dict) -> str:
    d = os.path.join(cfg["out_root"], config_hash(cfg))
    os.makedirs(d, exist_ok=True)
    return d


def _model_config(cfg: dict) -> mdl.ModelConfig:
    fields = dict(cfg["model"])
    fields["disentangled"] = cfg["disentangled"]
    try:
        return mdl.ModelConfig.from_dict(fields)
    except TypeError as e:
        raise ConfigError(f"bad model config: {e}") from None


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    pendulum.generate_dataset(args.n_seq, args.T, args.seed, path=args.out)
    print(f"wrote {args.out} sha256={mdl.dataset_hash(args.out)}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, {
        "seed": args.seed, "dataset": args.dataset, "trainer": args.trainer,
        "epochs": args.epochs, "batch_size": args.batch_size,
        "out_root": args.out_root, "mode": args.mode,
        "disentangled": True if args.disentangled else None,
    })
    if not cfg["dataset"]:
        raise ConfigError("config field 'dataset' is required for training")
    if not os.path.exists(cfg["dataset"]):
        raise ConfigError(f"dataset not found: {cfg['dataset']}")
    out = run_dir(cfg)
    ds = pendulum.load_dataset(cfg["dataset"])
    train, _ = evaluation.split_dataset(ds)
    ckpt = os.path.join(out, "model.ckpt")
    csv_path = os.path.join(out, "metrics.csv")

    state = None
    start_epoch = 0
    if args.resume:
        if not os.path.exists(args.resume):
            raise ConfigError(f"cannot resume: no checkpoint at {args.resume}")
        model = mdl.load_model(args.resume)
        with open(args.resume + ".json") as f:
            sidecar = json.load(f)
        start_epoch = sidecar.get("epochs_done", 0)
        if "trainer_state" in sidecar:
            state = training.TrainerState.from_dict(sidecar["trainer_state"])
    else:
        model = mdl.EkvaeModel(_model_config(cfg), seed=cfg["seed"])

    def log(row):
        parts = [f"epoch {row['epoch']}", f"elbo {row['elbo']:.2f}",
                 f"D {row['distortion']:.2f}", f"R {row['rate']:.2f}"]
        if "lambda" in row:
            parts += [f"lambda {row['lambda']:.4g}", row["phase"]]
        if "beta" in row:
            parts.append(f"beta {row['beta']:.3f}")
        print("  ".join(parts), flush=True)

    extra = {"dataset_hash": mdl.dataset_hash(cfg["dataset"]),
             "run_config": cfg, "epochs_done": cfg["epochs"]}
    if cfg["trainer"] == "co":
        co = training.CoConfig(nu=cfg["nu"], tau1=cfg["tau1"], tau2=cfg["tau2"],
                               alpha_ema=cfg["alpha_ema"],
                               d0_override=cfg["d0_override"], lr=cfg["lr"],
                               epochs=cfg["epochs"])
        _, state = training.train_co(
            model, train.frames, train.actions, co,
            batch_size=cfg["batch_size"], seed=cfg["seed"], mode=cfg["mode"],
            csv_path=csv_path, state=state, start_epoch=start_epoch, log=log)
        extra["trainer_state"] = state.to_dict()
    else:
        training.train_anneal(
            model, train.frames, train.actions, epochs=cfg["epochs"],
            lr=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"],
            mode=cfg["mode"], ramp_frac=cfg["ramp_frac"], csv_path=csv_path,
            start_epoch=start_epoch, log=log)
    mdl.save_model(model, ckpt, extra=extra)
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {csv_path}")
    return 0


def _load_checkpoint_and_data(ckpt: str, dataset: str):
    if not os.path.exists(ckpt):
        raise ConfigError(f"checkpoint not found: {ckpt}")
    if not os.path.exists(dataset):
        raise ConfigError(f"dataset not found: {dataset}")
    model = mdl.load_model(ckpt)
    ds = pendulum.load_dataset(dataset)
    if ds.frames.shape[-1] != model.d_x:
        raise ConfigError(
            f"dataset frame dim {ds.frames.shape[-1]} does not match "
            f"checkpoint d_x {model.d_x}")
    return model, ds


def cmd_eval(args) -> int:
    model, ds = _load_checkpoint_and_data(args.checkpoint, args.dataset)
    _, test = evaluation.split_dataset(ds)
    report = evaluation.evaluate(model, test, prefix_len=args.prefix,
                                 seed=args.seed)
    print(report.to_json())
    if args.out:
        with open(args.out, "w") as f:
            f.write(report.to_json() + "\n")
    return 0


def cmd_predict(args) -> int:
    model, ds = _load_checkpoint_and_data(args.checkpoint, args.dataset)
    frames = ds.frames[args.seq : args.seq + 1]
    actions = ds.actions[args.seq : args.seq + 1]
    pred = mdl.predict(model, frames[:, :args.prefix], actions, ds.T)[0]
    np.save(args.out, pred)
    mse = float(np.mean((pred - frames[0]) ** 2))
    print(f"wrote {args.out}  mse={mse:.6g}")
    return 0


def cmd_dump_latents(args) -> int:
    model, ds = _load_checkpoint_and_data(args.checkpoint, args.dataset)
    evaluation.dump_latents(model, ds, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_policy(args) -> int:
    model, ds = _load_checkpoint_and_data(args.checkpoint, args.dataset)
    if not model.cfg.disentangled:
        raise ConfigError(
            "policy learning needs a disentangled checkpoint (trained with "
            "--disentangled so positions occupy the first latent block)")
    if args.goal_vel_demo is not None:
        demo = pendulum.load_dataset(args.goal_vel_demo)
        goal = control.encode_goal_velocity(model, demo.frames[0],
                                            demo.actions[0])
    elif args.goal_angle is not None:
        goal = control.encode_goal_position(
            model, pendulum.render(args.goal_angle))
    else:
        raise ConfigError("provide --goal-angle or --goal-vel-demo")
    policy = control.train_policy(
        model, goal, ds.frames, ds.actions, horizon=args.horizon,
        episodes=args.iters, seed=args.seed,
        log=lambda r: print(f"iter {r['iter']}  J_train {r['J_train']:.3f}  "
                            f"J_val {r['J_val']:.3f}", flush=True))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    policy.save(args.out)
    stats = {}
    if args.goal_angle is not None:
        stats = control.rollout_on_simulator(
            model, policy, args.goal_angle, episodes=args.episodes,
            T=args.rollout_steps, seed=args.seed)
        with open(args.out + ".stats.json", "w") as f:
            json.dump(stats, f, sort_keys=True, indent=1)
        print(json.dumps(stats, sort_keys=True))
    print(f"policy: {args.out}")
    return 0


# -- argument plumbing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ekvae")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a pendulum image dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-seq", type=int, default=500)
    g.add_argument("--T", type=int, default=15)
    g.add_argument("--seed", type=int, required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--trainer", choices=["co", "anneal"])
    t.add_argument("--mode", choices=["smoother", "filter"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-root")
    t.add_argument("--disentangled", action="store_true")
    t.add_argument("--resume", metavar="CHECKPOINT",
                   help="continue training from this checkpoint; --epochs "
                        "sets the new total")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="metrics on the held-out split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--prefix", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="conditioned rollout of one sequence")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--seq", type=int, default=0)
    pr.add_argument("--prefix", type=int, default=5)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_predict)

    d = sub.add_parser("dump-latents", help="CSV of smoothed latents")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--dataset", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_dump_latents)

    po = sub.add_parser("policy", help="train and test a latent-space policy")
    po.add_argument("--checkpoint", required=True)
    po.add_argument("--dataset", required=True)
    po.add_argument("--goal-angle", type=float)
    po.add_argument("--goal-vel-demo")
    po.add_argument("--horizon", type=int, default=15)
    po.add_argument("--iters", type=int, default=300)
    po.add_argument("--episodes", type=int, default=100)
    po.add_argument("--rollout-steps", type=int, default=30)
    po.add_argument("--seed", type=int, default=0)
    po.add_argument("--out", required=True)
    po.set_defaults(fn=cmd_policy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
