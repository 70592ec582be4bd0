"""Command-line interface: train / eval / ablate / check / plan / plot."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .core import InvalidInput, RngStream
from .envs import OBS_DIMS, ToyEnv
from .harness import (
    ABLATION_VARIANTS,
    build_encoder,
    build_library,
    collect_episode,
    config_from_dict,
    final_eval_return,
    format_ablation_table,
    load_config,
    plan_weights_for,
    run_ablation,
    run_training,
)
from .planner import Controller, PlannerConfig, plan as mpc_plan
from .worldmodel import load_checkpoint, save_checkpoint


def _load_config_or_die(path):
    if not os.path.exists(path):
        print(f"error: config file not found: {path}", file=sys.stderr)
        raise SystemExit(1)
    try:
        return load_config(path)
    except (InvalidInput, json.JSONDecodeError) as err:
        print(f"error: invalid config {path}: {err}", file=sys.stderr)
        raise SystemExit(1)


def cmd_train(args) -> int:
    cfg = _load_config_or_die(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    records, model = run_training(cfg, seed=seed, out_dir=args.out)
    if args.out:
        save_checkpoint(model, os.path.join(args.out, "model.json"))
    print(f"trained {records[-1].step} env steps, final eval return {final_eval_return(records):.3f}")
    return 0


def cmd_eval(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, InvalidInput, json.JSONDecodeError) as err:
        print(f"error: cannot load checkpoint {args.checkpoint}: {err}", file=sys.stderr)
        return 1
    cfg = _load_config_or_die(args.config)
    if OBS_DIMS[cfg.env] != model.cfg.obs_dim:
        print(
            f"error: checkpoint obs dim {model.cfg.obs_dim} does not match env {cfg.env!r}",
            file=sys.stderr,
        )
        return 1
    library = build_library(cfg)
    weights = plan_weights_for(cfg, library)
    encoder = build_encoder(cfg, library, seed=args.seed)
    returns = []
    for k in range(args.episodes):
        ctrl = Controller(
            model, library, weights, encoder, cfg.fusion, cfg.planner,
            RngStream(args.seed).child("eval-plan", k),
        )
        env = ToyEnv(cfg.env, max_steps=cfg.episode_steps)
        ret, _ = collect_episode(ctrl, env, None, seed=args.seed + k)
        returns.append(ret)
    print(f"episodes: {args.episodes}  mean return: {np.mean(returns):.3f}  std: {np.std(returns):.3f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config_or_die(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in ABLATION_VARIANTS:
            print(f"error: unknown ablation variant {v!r} (choose from {ABLATION_VARIANTS})", file=sys.stderr)
            return 1
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    summary = run_ablation(cfg, variants, seeds=seeds, out_dir=args.out)
    print(format_ablation_table(summary))
    if args.out:
        with open(os.path.join(args.out, "ablation_summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
    return 0


def cmd_check(args) -> int:
    from .checks import run_all_checks

    all_ok, results = run_all_checks(seed=args.seed)
    for name, (ok, details) in results.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {details}")
    return 0 if all_ok else 1


def cmd_plan(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, InvalidInput, json.JSONDecodeError) as err:
        print(f"error: cannot load checkpoint {args.checkpoint}: {err}", file=sys.stderr)
        return 1
    try:
        obs = np.asarray(json.loads(args.obs), dtype=np.float64)
    except (json.JSONDecodeError, ValueError) as err:
        print(f"error: --obs must be a JSON array of numbers: {err}", file=sys.stderr)
        return 1
    if obs.ndim != 1 or obs.size != model.cfg.obs_dim:
        print(f"error: obs must have dim {model.cfg.obs_dim}", file=sys.stderr)
        return 1
    z = model.encode(obs)
    a_ref = np.zeros(model.cfg.action_dim)
    result = mpc_plan(model, z, a_ref, PlannerConfig(), RngStream(args.seed))
    print(
        json.dumps(
            {
                "actions": result.actions.tolist(),
                "predicted_return": result.predicted_return,
                "iterations_used": result.iterations_used,
            }
        )
    )
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    steps, rets = [], []
    with open(args.metrics) as fh:
        for line in fh:
            d = json.loads(line)
            if d.get("kind") == "eval":
                steps.append(d["step"])
                rets.append(d["eval_return"])
    fig, ax = plt.subplots()
    ax.plot(steps, rets, marker="o")
    ax.set_xlabel("env steps")
    ax.set_ylabel("eval return")
    fig.savefig(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiermpc", description="Expert-fusion MPC on toy environments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training loop from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation variants over shared seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", required=True, help="comma-separated variant tags")
    p.add_argument("--seeds", default=None, help="comma-separated integer seeds")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("check", help="run gradient / contraction / oracle suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("plan", help="one-shot planning dump from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--obs", required=True, help="JSON array observation")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("plot", help="plot eval returns from a metrics JSONL to SVG")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit as err:
        raise err
    except InvalidInput as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
