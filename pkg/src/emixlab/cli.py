"""Command-line entry point: train | ablate | evaluate | check | plot."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks as checks_mod
from . import harness, nn
from .env import SpuriousCaptureEnv
from .learner import Learner, evaluate_policy


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="INI config file (defaults used when omitted)")
    p.add_argument("--algo", choices=("emix", "qmix", "twinqmix", "vdn", "iql"))
    p.add_argument("--beta", type=float)
    p.add_argument("--m-targets", type=int, dest="m_targets")
    p.add_argument("--seeds", type=str, help="comma-separated seed list")
    p.add_argument("--total-steps", type=int, dest="total_steps")
    p.add_argument("--out", type=Path, help="output directory")
    storm = p.add_mutually_exclusive_group()
    storm.add_argument("--storm", action="store_true", default=None,
                       help="force the default storm probability (0.05)")
    storm.add_argument("--no-storm", dest="storm", action="store_false",
                       help="set p_storm = 0")


def _load_experiment(args) -> harness.ExperimentConfig:
    if args.config is not None:
        exp = harness.load_config(args.config)
    else:
        exp = harness.ExperimentConfig()
    run = exp.run
    lrn, env = run.learner, run.env
    if args.algo is not None:
        lrn = replace(lrn, algo=args.algo)
    if args.beta is not None:
        lrn = replace(lrn, beta=args.beta)
    if getattr(args, "m_targets", None) is not None:
        lrn = replace(lrn, m=args.m_targets)
    if args.storm is not None:
        env = replace(env, p_storm=0.05 if args.storm else 0.0)
    if args.total_steps is not None:
        run = replace(run, total_steps=args.total_steps)
    run = replace(run, learner=lrn, env=env)
    exp = replace(exp, run=run)
    if args.seeds is not None:
        exp = replace(exp, seeds=[int(s) for s in args.seeds.split(",")])
    if args.out is not None:
        exp = replace(exp, output_dir=args.out)
    return exp


def cmd_train(args) -> int:
    exp = _load_experiment(args)
    if args.name:
        exp = replace(exp, name=args.name)
    report = harness.run_experiment(exp, progress=not args.quiet)
    fin = report.final["success_rate"]
    std = f" +/- {fin['std']:.3f}" if fin["std"] is not None else ""
    print(f"{exp.name}: terminal success {fin['mean']:.3f}{std} "
          f"over {report.n_seeds} seeds -> {exp.output_dir / exp.name}")
    return 0


def cmd_ablate(args) -> int:
    exp = _load_experiment(args)
    algos = args.algos.split(",")
    betas = [float(b) for b in args.betas.split(",")]
    reports = {}
    for sub in harness.ablation_matrix(exp, algos, betas):
        reports[sub.name] = harness.run_experiment(sub, progress=not args.quiet)
    for metric in ("success_rate", "energy_ratio_mean", "abs_td_error"):
        out = exp.output_dir / f"ablation_{metric}.svg"
        out.parent.mkdir(parents=True, exist_ok=True)
        harness.plot_curves(reports, metric, out)
        print(f"wrote {out}")
    for name, rep in reports.items():
        fin = rep.final["success_rate"]
        print(f"  {name}: terminal success {fin['mean']:.3f}")
    return 0


def cmd_evaluate(args) -> int:
    exp = _load_experiment(args)
    ckpt = args.checkpoint
    if not ckpt.exists():
        print(f"checkpoint not found: {ckpt}", file=sys.stderr)
        return 2
    loaded = nn.load_checkpoint(ckpt)
    lrn = Learner(exp.run.env, exp.run.learner, np.random.default_rng(0))
    lrn.params.sync_from(loaded)
    env = SpuriousCaptureEnv(replace(exp.run.env, seed=args.seed))
    if args.trace:
        _traced_rollouts(lrn, env, args.episodes, Path(args.trace))
    succ, ret = evaluate_policy(lrn, env, args.episodes)
    print(f"greedy evaluation: success {succ:.3f}, mean return {ret:.2f} "
          f"over {args.episodes} episodes")
    return 0


def _traced_rollouts(lrn, env, n_episodes, path: Path) -> None:
    """Replay trace: one JSONL line per step (state, actions, reward)."""
    rng = np.random.default_rng(0)
    with open(path, "w") as fh:
        for ep in range(n_episodes):
            _, obs = env.reset()
            last = None
            t = 0
            while True:
                actions = lrn.act(obs, last, 0.0, rng)
                res = env.step(actions)
                fh.write(json.dumps({
                    "episode": ep, "t": t,
                    "state": res.state.tolist(),
                    "actions": actions.tolist(),
                    "reward": res.reward,
                    "info": res.info}) + "\n")
                obs, last = res.observations, actions
                t += 1
                if res.terminated or res.truncated:
                    break
    print(f"wrote trace {path}")


def cmd_check(args) -> int:
    return 0 if checks_mod.run_all(verbose=True) else 1


def cmd_plot(args) -> int:
    reports = {}
    for d in args.runs:
        d = Path(d)
        agg = d / "aggregate.json"
        if agg.exists():
            with open(agg) as fh:
                reports[d.name] = harness.AggregateReport(**json.load(fh))
        else:
            logs = sorted(d.glob("seed*/metrics.jsonl"))
            if not logs:
                print(f"no metrics found under {d}", file=sys.stderr)
                return 2
            reports[d.name] = harness.aggregate(
                [harness.read_metrics(p) for p in logs])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.plot_curves(reports, args.metric, out)
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="emixlab",
        description="Multi-agent value-factorization lab on the "
                    "SpuriousCapture gridworld")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one config across its seeds")
    _add_override_flags(p)
    p.add_argument("--name", type=str, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", help="expand an algo x beta matrix")
    _add_override_flags(p)
    p.add_argument("--algos", type=str, default="emix")
    p.add_argument("--betas", type=str, default="0.001,0.01,0.1")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("evaluate", help="greedy rollout of a checkpoint")
    _add_override_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", type=str, default=None,
                   help="dump a per-step replay trace (JSONL) to this path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("check", help="run the property/oracle suite")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("plot", help="render metric curves to SVG")
    p.add_argument("--runs", nargs="+", required=True,
                   help="experiment directories (containing seed*/ or aggregate.json)")
    p.add_argument("--metric", default="success_rate",
                   choices=harness.CURVE_METRICS)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (harness.HarnessError, nn.NNError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
