"""Command-line entry points: gen-data, train, eval, ood-hist, ingest-points.

Every subcommand takes --config/--seed/--out; failures exit nonzero with a
machine-readable JSON error on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from .. import envgen
from ..checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from ..dataset import DatasetDir, DatasetMeta, EnvRecord, write_dataset
from ..grids import occupancy_to_sdf
from ..posterior import (LOG_COLUMNS, build_models, make_optimizer,
                         train_posterior)
from ..seeding import rng_from
from .configs import ConfigError, RootConfig, load_config
from .evaluation import (build_tasks, evaluate_suite, ood_csv, ood_histogram,
                         ood_plot, results_csv, results_table,
                         trial_records_jsonl, write_trajectory_csv)


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None, help="YAML config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=Path, required=True, help="output path")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override")


def _load(args) -> RootConfig:
    config = load_config(args.config, args.overrides)
    if args.seed is not None:
        import dataclasses

        config = dataclasses.replace(config, seed=args.seed)
    return config


def _generate_records(config: RootConfig, seed: int):
    ds = config.dataset
    dim = 2 if config.system == "planar" else 3
    records = []
    for i in range(ds.n_envs):
        rng = rng_from(seed, "env", i)
        for _ in range(20):
            sdf = envgen.generate_environment(
                rng, ds.kind, dim, size=ds.grid_size, extent=ds.extent,
                obstacle_params=ds.obstacles, passage_params=ds.passages,
            )
            try:
                pairs = [envgen.sample_start_goal(
                    sdf, rng, config.system, velocity_std=ds.start_velocity_std)
                    for _ in range(ds.n_pairs)]
            except envgen.InfeasibleEnvironment:
                continue
            break
        else:
            raise envgen.InfeasibleEnvironment(f"environment {i}: no feasible tasks")
        starts = np.stack([p[0] for p in pairs])
        goals = np.stack([p[1] for p in pairs])
        records.append(EnvRecord(
            occupancy=sdf.occupied, sdf_values=sdf.values, extent=ds.extent,
            starts=starts, goals=goals,
        ))
    return records


def cmd_gen_data(args) -> int:
    config = _load(args)
    ds = config.dataset
    records = _generate_records(config, config.seed)
    meta = DatasetMeta(
        system=config.system, env_kind=ds.kind,
        grid_dim=2 if config.system == "planar" else 3,
        grid_size=ds.grid_size, extent=ds.extent, n_envs=len(records),
        n_pairs=ds.n_pairs, seed=config.seed,
        generator_params={
            "obstacles": ds.obstacles.__dict__, "passages": ds.passages.__dict__,
        },
    )
    write_dataset(args.out, meta, records)
    print(f"wrote {len(records)} environments to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load(args)
    torch.set_num_threads(max(1, args.threads))
    dataset = DatasetDir(args.dataset)
    if dataset.meta.system != config.system:
        raise ConfigError(
            f"dataset is for {dataset.meta.system!r}, config says {config.system!r}"
        )
    schedule = config.train
    if args.resume is not None:
        state = load_checkpoint(args.resume)
        models = state.models
        schedule = state.schedule
        optimizer = restore_optimizer(state)
        start_epoch = state.epoch_next
    else:
        models = build_models(config.system, **config.resolved_model_kwargs())
        optimizer = make_optimizer(models, schedule.lr)
        start_epoch = 0

    log_path = args.out.with_suffix(".log.csv") if args.log is None else args.log
    log_path.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume is not None and log_path.exists() else "w"
    end_epoch = schedule.epochs if args.epochs is None else min(args.epochs, schedule.epochs)
    with open(log_path, mode, newline="") as log_file:
        writer = csv.writer(log_file, lineterminator="\n")
        if mode == "w":
            writer.writerow(LOG_COLUMNS)

        def log_row(row):
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in LOG_COLUMNS])
            log_file.flush()

        optimizer, _ = train_posterior(
            dataset, models, schedule, start_epoch=start_epoch,
            end_epoch=end_epoch, optimizer=optimizer, log_callback=log_row,
        )
    save_checkpoint(args.out, models, schedule, end_epoch,
                    dataset_fingerprint=dataset.fingerprint(), optimizer=optimizer)
    print(f"checkpoint written to {args.out} (epochs {start_epoch}..{end_epoch})")
    return 0


def cmd_eval(args) -> int:
    config = _load(args)
    torch.set_num_threads(max(1, args.threads))
    models = None
    if args.checkpoint is not None:
        models = load_checkpoint(args.checkpoint).models
    tasks = build_tasks(config, config.suite.env_kind, config.suite.n_tasks, config.seed)
    rows, records = evaluate_suite(config, tasks, models, config.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "results.csv").write_text(results_csv(rows))
    (args.out / "trials.jsonl").write_text(trial_records_jsonl(records))
    table = results_table(rows)
    (args.out / "results.txt").write_text(table + "\n")
    if config.suite.save_trajectories:
        traj_dir = args.out / "trajectories"
        traj_dir.mkdir(exist_ok=True)
        from .. import controllers as ctrl

        for rec in records:
            task = tasks[rec["task_id"]]
            variant = rec["controller"]
            base = variant.split("_ood_only")[0].split("_flow_only")[0]
            cfg = ctrl.default_config(base, config.system, k=rec["K"])
            controller = ctrl.make_controller(base, config.system, cfg, models=models)
            result = ctrl.run_trial(task, controller, seed=rec["seed"],
                                    max_steps=config.suite.max_steps,
                                    record_trajectory=True)
            write_trajectory_csv(
                traj_dir / f"{variant}_K{rec['K']}_task{rec['task_id']:04d}.csv",
                result.trajectory,
            )
    print(table)
    return 0


def cmd_ood_hist(args) -> int:
    config = _load(args)
    torch.set_num_threads(max(1, args.threads))
    models = load_checkpoint(args.checkpoint).models
    rows, score_auroc = ood_histogram(config, models, args.n_envs, config.seed,
                                      in_kind=args.in_kind, out_kind=args.out_kind)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ood_scores.csv").write_text(ood_csv(rows, score_auroc))
    ood_plot(rows, args.out / "ood_hist.png")
    print(f"AUROC (in-distribution vs {args.out_kind}): {score_auroc:.4f}")
    return 0


def cmd_ingest_points(args) -> int:
    config = _load(args)
    path = Path(args.points)
    if args.format == "auto":
        fmt = "ascii" if path.suffix.lower() in (".xyz", ".txt", ".asc") else "binary"
    else:
        fmt = args.format
    points = envgen.read_xyz_ascii(path) if fmt == "ascii" else envgen.read_xyz_binary(path)
    dim = 2 if config.system == "planar" else 3
    if dim == 2:
        points = points[:, :2]
    grid, dropped = envgen.ingest_points(points, extent=config.dataset.extent,
                                         size=config.dataset.grid_size, dim=dim)
    sdf = occupancy_to_sdf(grid)
    rng = rng_from(config.seed, "ingest")
    pairs = [envgen.sample_start_goal(sdf, rng, config.system)
             for _ in range(config.dataset.n_pairs)]
    record = EnvRecord(
        occupancy=grid.cells, sdf_values=sdf.values, extent=config.dataset.extent,
        starts=np.stack([p[0] for p in pairs]), goals=np.stack([p[1] for p in pairs]),
    )
    meta = DatasetMeta(
        system=config.system, env_kind="ingested",
        grid_dim=dim, grid_size=config.dataset.grid_size,
        extent=config.dataset.extent, n_envs=1, n_pairs=config.dataset.n_pairs,
        seed=config.seed, generator_params={"source": str(path), "dropped_points": dropped},
    )
    write_dataset(args.out, meta, [record])
    print(f"ingested {path} ({dropped} points dropped) into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowmppi",
        description="Sampling-based MPC with a learned control-sequence posterior",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a training/eval dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the posterior (and VAE) on a dataset")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, default=None,
                   help="stop after this epoch (checkpoint stays resumable)")
    p.add_argument("--log", type=Path, default=None, help="training log CSV path")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run controller suites over shared tasks")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ood-hist", help="OOD-score histogram and AUROC")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n-envs", type=int, default=100)
    p.add_argument("--in-kind", default="cluttered")
    p.add_argument("--out-kind", default="rooms")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_ood_hist)

    p = sub.add_parser("ingest-points", help="build an environment from a point cloud")
    _add_common(p)
    p.add_argument("--points", type=Path, required=True)
    p.add_argument("--format", choices=("auto", "ascii", "binary"), default="auto")
    p.set_defaults(func=cmd_ingest_points)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # surfaced as machine-readable JSON
        payload = {"error": type(err).__name__, "message": str(err)}
        if not isinstance(err, (ConfigError, FileNotFoundError, ValueError)):
            payload["traceback"] = traceback.format_exc()
        print(json.dumps(payload), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
