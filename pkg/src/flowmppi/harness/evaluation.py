"""Evaluation suites: shared task sets, trial records, result tables, and the
OOD-score histogram."""

from __future__ import annotations

import csv
import io
import json
import multiprocessing
from dataclasses import dataclass, replace

import numpy as np
import torch

from .. import controllers as ctrl
from ..envgen import Task, generate_task
from ..posterior import PosteriorModels
from ..seeding import rng_from
from .configs import RootConfig, SuiteConfig

RESULT_COLUMNS = ("controller", "K", "n_tasks", "success_rate", "mean_cost",
                  "mean_steps", "seed")


@dataclass(frozen=True)
class ResultRow:
    controller: str
    k: int
    n_tasks: int
    success_rate: float
    mean_cost: float
    mean_steps: float
    seed: int

    def as_csv_row(self) -> list[str]:
        return [self.controller, str(self.k), str(self.n_tasks),
                repr(self.success_rate), repr(self.mean_cost),
                repr(self.mean_steps), str(self.seed)]


def build_tasks(config: RootConfig, env_kind: str, n_tasks: int, seed: int) -> list[Task]:
    """The shared task set for one suite; identical for every controller."""
    ds = config.dataset
    tasks = []
    for i in range(n_tasks):
        rng = rng_from(seed, "eval-task", env_kind, i)
        tasks.append(
            generate_task(
                rng, env_kind, config.system, size=ds.grid_size, extent=ds.extent,
                obstacle_params=ds.obstacles, passage_params=ds.passages,
            )
        )
    return tasks


@dataclass(frozen=True)
class ControllerVariant:
    """A named controller configuration to evaluate (ablations get their own
    variant names)."""

    label: str
    base: str
    cfg_overrides: dict


def expand_variants(suite: SuiteConfig, controller_overrides: dict) -> list[ControllerVariant]:
    variants = []
    for name in suite.controllers:
        overrides = dict(controller_overrides.get(name, {}))
        if name == "flowmppi_project" and suite.projection_ablation:
            variants.append(ControllerVariant(name, name, overrides))
            variants.append(ControllerVariant(
                f"{name}_ood_only", name,
                overrides | {"project_use_flow": False}))
            variants.append(ControllerVariant(
                f"{name}_flow_only", name,
                overrides | {"project_use_ood": False}))
        else:
            variants.append(ControllerVariant(name, name, overrides))
    return variants


def _run_one_trial(system, variant: ControllerVariant, k: int, task: Task,
                   task_id: int, seed: int, max_steps: int,
                   models: PosteriorModels | None) -> dict:
    cfg = ctrl.default_config(variant.base, system, k=k)
    if variant.cfg_overrides:
        cfg = replace(cfg, **variant.cfg_overrides)
    controller = ctrl.make_controller(variant.base, system, cfg, models=models)
    trial_seed = int(rng_from(seed, "trial", variant.label, k, task_id)
                     .integers(0, 2**31 - 1))
    result = ctrl.run_trial(task, controller, seed=trial_seed, max_steps=max_steps)
    return {
        "task_id": task_id,
        "controller": variant.label,
        "K": k,
        "seed": trial_seed,
        "success": result.success,
        "failure_kind": result.failure_kind,
        "executed_cost": result.executed_cost,
        "steps": result.steps,
        "rollouts": result.rollouts,
        "wall_time": result.wall_time,
    }


_POOL_STATE: dict = {}


def _pool_init(system, tasks, models, max_steps, seed):
    torch.set_num_threads(1)
    _POOL_STATE.update(system=system, tasks=tasks, models=models,
                       max_steps=max_steps, seed=seed)


def _pool_run(args):
    variant, k, task_id = args
    s = _POOL_STATE
    return _run_one_trial(s["system"], variant, k, s["tasks"][task_id], task_id,
                          s["seed"], s["max_steps"], s["models"])


def evaluate_suite(
    config: RootConfig,
    tasks: list[Task],
    models: PosteriorModels | None,
    seed: int,
) -> tuple[list[ResultRow], list[dict]]:
    """Run every controller variant at every budget over the shared tasks."""
    suite = config.suite
    variants = expand_variants(suite, config.controllers)
    needs_models = [v.label for v in variants if v.base.startswith("flowmppi")]
    if needs_models and models is None:
        raise ValueError(f"controllers {needs_models} require a trained checkpoint")

    jobs = [(variant, k, i) for variant in variants for k in suite.budgets
            for i in range(len(tasks))]
    if suite.workers > 1:
        context = multiprocessing.get_context("fork")
        with context.Pool(
            suite.workers, initializer=_pool_init,
            initargs=(config.system, tasks, models, suite.max_steps, seed),
        ) as pool:
            records = pool.map(_pool_run, jobs)
    else:
        records = [
            _run_one_trial(config.system, variant, k, tasks[i], i, seed,
                           suite.max_steps, models)
            for variant, k, i in jobs
        ]

    records.sort(key=lambda r: (r["controller"], r["K"], r["task_id"]))
    rows = []
    for variant in variants:
        for k in suite.budgets:
            group = [r for r in records if r["controller"] == variant.label and r["K"] == k]
            rows.append(aggregate(group, variant.label, k, seed,
                                  suite.include_failures_in_cost))
    return rows, records


def aggregate(records: list[dict], label: str, k: int, seed: int,
              include_failures: bool) -> ResultRow:
    n = len(records)
    successes = [r for r in records if r["success"]]
    costed = records if include_failures else successes
    mean_cost = float(np.mean([r["executed_cost"] for r in costed])) if costed else float("nan")
    mean_steps = float(np.mean([r["steps"] for r in records]))
    return ResultRow(
        controller=label, k=k, n_tasks=n,
        success_rate=len(successes) / n,
        mean_cost=mean_cost, mean_steps=mean_steps, seed=seed,
    )


def results_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in rows:
        writer.writerow(row.as_csv_row())
    return buf.getvalue()


def results_table(rows: list[ResultRow]) -> str:
    header = f"{'controller':<28}{'K':>6}{'tasks':>7}{'success':>9}{'cost':>12}{'steps':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.controller:<28}{r.k:>6}{r.n_tasks:>7}{r.success_rate:>9.3f}"
            f"{r.mean_cost:>12.1f}{r.mean_steps:>8.1f}"
        )
    return "\n".join(lines)


def trial_records_jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def write_trajectory_csv(path, trajectory: list[np.ndarray]) -> None:
    """One row per timestep, float32 formatting as in the dataset files."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        dx = len(trajectory[0])
        writer.writerow(["t"] + [f"x{i}" for i in range(dx)])
        for t, state in enumerate(trajectory):
            writer.writerow([t] + [repr(float(np.float32(v))) for v in state])


def auroc(scores_in: np.ndarray, scores_out: np.ndarray) -> float:
    """Probability that an OOD score exceeds an in-distribution score
    (Mann-Whitney; ties count half)."""
    scores_in = np.asarray(scores_in, dtype=np.float64)
    scores_out = np.asarray(scores_out, dtype=np.float64)
    combined = np.concatenate([scores_in, scores_out])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty_like(order, dtype=np.float64)
    ranks[order] = np.arange(1, len(combined) + 1)
    # average ranks over ties
    sorted_vals = combined[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = ranks[order[i : j + 1]].mean()
        i = j + 1
    n_in, n_out = len(scores_in), len(scores_out)
    rank_sum_out = ranks[n_in:].sum()
    u = rank_sum_out - n_out * (n_out + 1) / 2.0
    return float(u / (n_in * n_out))


def ood_scores_for_envs(models: PosteriorModels, sdf_values_list: list[np.ndarray]) -> np.ndarray:
    """Per-dimension OOD score for each environment, deterministic encoding."""
    models.eval()
    scores = []
    with torch.no_grad():
        for values in sdf_values_list:
            h = models.encode_sdf(values)
            scores.append(float(models.ood_score(h)))
    return np.asarray(scores)


def ood_histogram(
    config: RootConfig,
    models: PosteriorModels,
    n_envs: int,
    seed: int,
    in_kind: str = "cluttered",
    out_kind: str = "rooms",
):
    """Scores for in-distribution and OOD environment sets plus the AUROC."""
    from ..envgen import generate_environment

    ds = config.dataset
    dim = 2 if config.system == "planar" else 3
    rows = []
    per_kind = {}
    for label, kind in (("in_distribution", in_kind), ("ood", out_kind)):
        sdfs = []
        for i in range(n_envs):
            rng = rng_from(seed, "ood-env", kind, label, i)
            sdf = generate_environment(rng, kind, dim, size=ds.grid_size,
                                       extent=ds.extent, obstacle_params=ds.obstacles,
                                       passage_params=ds.passages)
            sdfs.append(sdf.values)
        scores = ood_scores_for_envs(models, sdfs)
        per_kind[label] = scores
        rows += [(f"{label}_{i:04d}", label, float(s)) for i, s in enumerate(scores)]
    score_auroc = auroc(per_kind["in_distribution"], per_kind["ood"])
    return rows, score_auroc


def ood_csv(rows, score_auroc: float) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["env_id", "label", "score"])
    for env_id, label, score in rows:
        writer.writerow([env_id, label, repr(score)])
    writer.writerow(["# auroc", "", repr(score_auroc)])
    return buf.getvalue()


def ood_plot(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_label = {}
    for _, label, score in rows:
        by_label.setdefault(label, []).append(score)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, scores in sorted(by_label.items()):
        ax.hist(scores, bins=30, alpha=0.6, label=label)
    ax.set_xlabel("OOD score (per latent dimension)")
    ax.set_ylabel("environments")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
