"""Experiment orchestration: config files, seed sweeps, aggregation, plots.

Config files are flat INI with one section per module::

    [env]
    grid_size = 7
    p_storm = 0.05

    [learner]
    algo = emix
    beta = 0.01

    [run]
    total_steps = 200000
    eval_interval = 5000
    seeds = 1,2,3,4,5
    output_dir = results/demo

Every run directory receives the fully resolved config (defaults expanded)
alongside its metrics log, so artifacts are reproducible from the directory
alone. The output root can be redirected with the EMIXLAB_OUT environment
variable.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .env import EnvConfig
from .learner import LearnerConfig, RunConfig, train_run

CURVE_METRICS = ("success_rate", "mean_return", "abs_td_error",
                 "energy_ratio_mean", "epsilon", "loss")


class HarnessError(Exception):
    pass


class ConfigFileError(HarnessError):
    pass


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    output_dir: Path = Path("results/run")
    name: str = "run"

    def __post_init__(self):
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise HarnessError("seeds must be non-empty and distinct")


@dataclass
class AggregateReport:
    steps: list[int]
    curves: dict            # metric -> {"mean": [...], "std": [...] | None}
    final: dict             # metric -> {"mean": x, "std": y | None, "per_seed": [...]}
    n_seeds: int


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigFileError(f"not a boolean: '{value}'")
    if value.strip().lower() == "none":
        return None
    return target_type(value)


def _apply_section(cls, section: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigFileError(f"unknown key '{key}' in section [{where}]")
        ftype = fields[key].type
        base = {"int": int, "float": float, "str": str, "bool": bool,
                "Optional[int]": int, "Optional[float]": float,
                "Optional[str]": str}.get(ftype, str)
        kwargs[key] = _coerce(raw, base)
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigFileError(f"config file not found: {path}")
    known = {"env", "learner", "run"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigFileError(f"unknown config sections: {sorted(extra)}")
    env_cfg = _apply_section(EnvConfig, dict(parser["env"]) if "env" in parser else {}, "env")
    lrn_cfg = _apply_section(LearnerConfig, dict(parser["learner"]) if "learner" in parser else {}, "learner")

    run_section = dict(parser["run"]) if "run" in parser else {}
    seeds = [1, 2, 3, 4, 5]
    output_dir = Path("results") / "run"
    name = Path(path).stem
    run_kwargs = {}
    run_fields = {f.name for f in dataclasses.fields(RunConfig)} - {"env", "learner"}
    for key, raw in run_section.items():
        if key == "seeds":
            seeds = [int(s) for s in raw.replace(",", " ").split()]
        elif key == "output_dir":
            output_dir = Path(raw)
        elif key == "name":
            name = raw
        elif key in run_fields:
            base = int if key != "checkpoint_interval" else int
            run_kwargs[key] = _coerce(raw, base)
        else:
            raise ConfigFileError(f"unknown key '{key}' in section [run]")
    run_cfg = RunConfig(env=env_cfg, learner=lrn_cfg, **run_kwargs)
    root = os.environ.get("EMIXLAB_OUT")
    if root and not output_dir.is_absolute():
        output_dir = Path(root) / output_dir
    return ExperimentConfig(run=run_cfg, seeds=seeds, output_dir=output_dir,
                            name=name)


def dump_config(exp: ExperimentConfig, path) -> None:
    """Write the fully resolved config (defaults expanded) for provenance."""
    parser = configparser.ConfigParser()
    parser["env"] = {k: str(v) for k, v in dataclasses.asdict(exp.run.env).items()}
    lrn = dataclasses.asdict(exp.run.learner)
    parser["learner"] = {k: str(v) for k, v in lrn.items()}
    parser["run"] = {
        "total_steps": str(exp.run.total_steps),
        "eval_interval": str(exp.run.eval_interval),
        "eval_episodes": str(exp.run.eval_episodes),
        "checkpoint_interval": str(exp.run.checkpoint_interval),
        "seeds": ",".join(str(s) for s in exp.seeds),
        "output_dir": str(exp.output_dir),
        "name": exp.name,
    }
    with open(path, "w") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Running and aggregating
# ---------------------------------------------------------------------------

def seed_dir(exp: ExperimentConfig, seed: int) -> Path:
    return exp.output_dir / exp.name / f"seed{seed}"


def run_experiment(exp: ExperimentConfig, progress: bool = False,
                   reuse: bool = True) -> AggregateReport:
    """Run every seed, write per-seed artifacts, and aggregate.

    Completed seed directories (metrics.jsonl present) are reused by default:
    runs are pure functions of (config, seed), so a finished log is as good
    as a fresh one.
    """
    logs = []
    for seed in exp.seeds:
        out = seed_dir(exp, seed)
        metrics_path = out / "metrics.jsonl"
        if reuse and metrics_path.exists():
            logs.append(read_metrics(metrics_path))
            continue
        out.mkdir(parents=True, exist_ok=True)
        dump_config(exp, out / "config.ini")
        if progress:
            print(f"== {exp.name} seed {seed} ==")
        logs.append(train_run(exp.run, seed, metrics_path=metrics_path,
                              checkpoint_path=out / "final.ckpt",
                              progress=progress))
    report = aggregate(logs)
    with open(exp.output_dir / exp.name / "aggregate.json", "w") as fh:
        json.dump(dataclasses.asdict(report), fh, indent=2)
    return report


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def aggregate(logs: list[list[dict]]) -> AggregateReport:
    """Mean and population std across seeds on a shared step grid."""
    if not logs:
        raise HarnessError("aggregate needs at least one metrics log")
    grids = [[rec["step"] for rec in log] for log in logs]
    if any(g != grids[0] for g in grids[1:]):
        bad = [i for i, g in enumerate(grids) if g != grids[0]]
        raise HarnessError(f"mismatched step grids in runs {bad}")
    steps = grids[0]
    multi = len(logs) >= 2
    curves = {}
    final = {}
    for metric in CURVE_METRICS:
        values = np.array([[rec[metric] for rec in log] for log in logs])
        curves[metric] = {"mean": values.mean(axis=0).tolist(),
                          "std": values.std(axis=0).tolist() if multi else None}
        final[metric] = {"mean": float(values[:, -1].mean()),
                         "std": float(values[:, -1].std()) if multi else None,
                         "per_seed": values[:, -1].tolist()}
    return AggregateReport(steps=steps, curves=curves, final=final,
                           n_seeds=len(logs))


def ablation_matrix(base: ExperimentConfig, algos: list[str],
                    betas: list[float]) -> list[ExperimentConfig]:
    """Expand an algo x beta grid into named experiment configs."""
    out = []
    for algo in algos:
        for beta in betas:
            lrn = replace(base.run.learner, algo=algo, beta=beta)
            name = f"{algo}_beta{beta:g}"
            out.append(replace(base, run=replace(base.run, learner=lrn),
                               name=name))
    return out


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def plot_curves(reports: dict[str, AggregateReport], metric: str,
                out_path, title: Optional[str] = None) -> None:
    """Static SVG: mean curve per experiment with a +/- std band."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, rep in reports.items():
        steps = np.asarray(rep.steps)
        mean = np.asarray(rep.curves[metric]["mean"])
        ax.plot(steps, mean, label=name)
        std = rep.curves[metric]["std"]
        if std is not None:
            std = np.asarray(std)
            ax.fill_between(steps, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(metric.replace("_", " "))
    ax.set_title(title or metric.replace("_", " "))
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
