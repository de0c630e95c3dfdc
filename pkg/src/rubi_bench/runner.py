"""End-to-end experiment orchestration: dataset generation, single training
runs with on-disk artifacts, the multi-seed driver, and the ablation grid.

A run directory is named by the config digest plus the training seed, so
incompatible configs can never silently share artifacts, and reruns of an
existing run are refused unless forced (or reused, for grid aggregation).
Grid cells are independent and may execute in parallel worker processes.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .datagen import bias_audit, generate, load_dataset, save_dataset
from .report import build_run_report, write_json
from .strategy import StrategyConfig
from .trainer import (
    build_model_and_branch,
    evaluate_predictions,
    save_checkpoint,
    train,
)
from .datagen import SplitArrays

__all__ = ["RunExistsError", "gen_data", "run_one", "run_seeds", "ABLATION_CELLS",
           "run_ablation", "load_run_report"]


class RunExistsError(RuntimeError):
    pass


_DATASET_CACHE = {}


def _load_dataset_cached(data_dir: Path):
    key = str(data_dir)
    if key not in _DATASET_CACHE:
        _DATASET_CACHE.clear()  # at most one resident dataset per process
        _DATASET_CACHE[key] = load_dataset(data_dir)
    return _DATASET_CACHE[key]


def gen_data(config: RunConfig):
    """Generate and write the three splits plus sidecar; returns
    (paths, audit rows for the train split)."""
    dataset = generate(config.dataset)
    paths = save_dataset(dataset, config.dataset_dir())
    audit = bias_audit(dataset.splits["train"], dataset.answers)
    return paths, audit


def run_label(config: RunConfig) -> str:
    label = config.train.strategy.label()
    if config.train.sampler != "standard":
        label += f"+{config.train.sampler}"
    return label


def run_one(config: RunConfig, train_seed: int | None = None, *,
            force: bool = False, reuse: bool = False) -> Path:
    """Execute one training run and write its artifacts; returns the run dir.

    With ``reuse`` a completed run directory is returned as-is; with
    ``force`` it is re-executed; otherwise an existing completed run is an
    error.
    """
    train_seed = config.seed if train_seed is None else train_seed
    run_dir = config.output_dir / config.run_id(train_seed)
    done = run_dir / "done.json"
    if done.exists():
        if reuse and not force:
            return run_dir
        if not force:
            raise RunExistsError(f"run {run_dir} already exists (use --force to redo)")

    data_dir = config.dataset_dir()
    if not (data_dir / "dataset.json").exists():
        raise FileNotFoundError(
            f"dataset not found at {data_dir}; run gen-data with this config first")
    dataset = _load_dataset_cached(data_dir)

    sizes = config.model_sizes(len(dataset.vocab), len(dataset.answers))
    model, branch = build_model_and_branch(sizes, train_seed)
    train_config = replace(config.train, seed=train_seed)
    runlog = train(model, branch, dataset, train_config)

    run_dir.mkdir(parents=True, exist_ok=True)
    digest = config.digest()
    label = run_label(config)
    params = model.named_parameters() + branch.named_parameters()
    save_checkpoint(params, run_dir / "checkpoint.bin", digest)
    write_json(run_dir / "runlog.json", runlog)
    write_json(run_dir / "config.json", {
        "resolved": config.resolved(),
        "digest": digest,
        "train_seed": train_seed,
        "strategy_label": label,
        "dataset_dir": str(data_dir),
        "run_id": config.run_id(train_seed),
    })

    loss_traces = {
        key: [ep[key] for ep in runlog["epochs"]]
        for key in ("mean_l_qm", "mean_l_qo", "mean_l_rubi", "train_accuracy")
    }
    for split in ("test_id", "test_ood"):
        arrays = SplitArrays(dataset.splits[split])
        preds = evaluate_predictions(model, branch, arrays, train_config.strategy,
                                     train_config.batch_size)
        write_json(run_dir / f"predictions_{split}.json", preds.tolist())
        rep = build_run_report(preds, dataset.splits[split], len(dataset.answers),
                               split=split, strategy_label=label, config_digest=digest,
                               seed=train_seed, loss_traces=loss_traces)
        write_json(run_dir / f"report_{split}.json", rep.to_json())
    write_json(done, {"run_id": config.run_id(train_seed)})
    return run_dir


def load_run_report(run_dir: Path, split: str) -> dict:
    with open(Path(run_dir) / f"report_{split}.json", encoding="utf-8") as fh:
        return json.load(fh)


def run_seeds(config: RunConfig, n_seeds: int, *, force: bool = False,
              reuse: bool = False) -> list:
    """Train seeds seed, seed+1, ... on the one dataset pinned by the config."""
    return [run_one(config, config.seed + i, force=force, reuse=reuse)
            for i in range(n_seeds)]


# the ablation grid: strategy variants plus the sampling baselines
ABLATION_CELLS = (
    ("classical", StrategyConfig(strategy="classical"), "standard"),
    ("rubi", StrategyConfig(strategy="rubi"), "standard"),
    ("rubi_relu", StrategyConfig(strategy="rubi", mask_activation="relu"), "standard"),
    ("rubi_sum", StrategyConfig(strategy="rubi", combine="sum"), "standard"),
    ("rubi_no_qo", StrategyConfig(strategy="rubi", use_qo_loss=False), "standard"),
    ("question_only", StrategyConfig(strategy="question_only"), "standard"),
    ("classical+standard", StrategyConfig(strategy="classical"), "standard"),
    ("classical+answer_balanced", StrategyConfig(strategy="classical"), "answer_balanced"),
    ("classical+qtype_balanced", StrategyConfig(strategy="classical"), "qtype_balanced"),
)


def cell_config(config: RunConfig, strategy: StrategyConfig, sampler: str) -> RunConfig:
    train = replace(config.train, strategy=strategy, sampler=sampler)
    return replace(config, train=train)


def _run_cell(args):
    config, seed = args
    run_one(config, seed, reuse=True)
    return str(config.output_dir / config.run_id(seed))


def run_ablation(config: RunConfig, n_seeds: int = 1, workers: int = 1,
                 force: bool = False) -> dict:
    """Execute the 9-cell grid over n_seeds seeds each; returns
    {cell label -> {seed -> run dir}}.  Completed runs are reused, so cells
    that share a config (classical and classical+standard) train once."""
    jobs = []
    layout = {}
    for label, strategy, sampler in ABLATION_CELLS:
        cfg = cell_config(config, strategy, sampler)
        layout[label] = {}
        for i in range(n_seeds):
            seed = config.seed + i
            layout[label][seed] = cfg.output_dir / cfg.run_id(seed)
            jobs.append((cfg, seed))

    if force:
        for cfg, seed in jobs:
            done = cfg.output_dir / cfg.run_id(seed) / "done.json"
            if done.exists():
                done.unlink()

    pending = []
    seen = set()
    for cfg, seed in jobs:
        rid = cfg.run_id(seed)
        if rid in seen:
            continue
        seen.add(rid)
        pending.append((cfg, seed))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_cell, pending))
    else:
        for job in pending:
            _run_cell(job)
    return layout


def gather_reports(layout: dict, split: str) -> list:
    """Collect per-run reports for a grid layout, relabeled by cell so
    aliased cells (identical configs) still appear as their own rows."""
    reports = []
    for label, runs in layout.items():
        for seed, run_dir in runs.items():
            data = load_run_report(run_dir, split)
            data["strategy_label"] = label
            reports.append(data)
    return reports
