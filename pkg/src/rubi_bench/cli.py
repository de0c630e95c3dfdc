"""Command-line surface: dataset generation, training, the ablation grid,
gradient checking, and report emission.

Every command is deterministic given its config file; seeds live in the
config.  The RUBI_BENCH_OUT environment variable overrides the configured
output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .datagen import SplitArrays, load_dataset
from .gradcheck import run_checks
from .report import compare_runs, comparison_csv, distribution_report, write_json
from .runner import (
    RunExistsError,
    gather_reports,
    gen_data,
    load_run_report,
    run_ablation,
    run_one,
    run_seeds,
)


def _print_table(table):
    header = f"{'strategy':<28s} {'overall':>16s} {'yes_no':>16s} {'number':>16s} {'other':>16s}"
    print(header)
    print("-" * len(header))
    for row in table:
        cells = [f"{row['strategy']:<28s}"]
        for col in ("overall", "yes_no", "number", "other"):
            mean = row.get(f"{col}_mean")
            std = row.get(f"{col}_std")
            cells.append("      (absent)  " if mean is None else f" {mean:7.4f} ±{std:6.4f}")
        print(" ".join(cells))


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    paths, audit = gen_data(config)
    print(f"wrote dataset under {paths['sidecar'].parent}")
    print(f"{'pattern':<12s} {'n':>6s} {'majority':>10s} {'share':>7s} {'entropy':>8s}")
    for row in audit:
        print(f"{row['pattern']:<12s} {row['count']:>6d} {row['majority_answer']:>10s} "
              f"{row['majority_share']:>7.3f} {row['entropy']:>8.3f}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    run_dirs = run_seeds(config, args.seeds, force=args.force)
    for run_dir in run_dirs:
        rep = load_run_report(run_dir, "test_ood")
        print(f"{run_dir}: test_ood overall {rep['overall']:.4f}")
    if args.seeds > 1:
        for split in ("test_ood", "test_id"):
            reports = [load_run_report(d, split) for d in run_dirs]
            table = compare_runs(reports)
            out = config.output_dir / f"comparison-{config.digest()[:12]}-{split}.csv"
            out.write_text(comparison_csv(table), encoding="utf-8")
            if split == "test_ood":
                _print_table(table)
                print(f"comparison written to {out}")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    t0 = time.perf_counter()
    layout = run_ablation(config, n_seeds=args.seeds, workers=args.workers, force=args.force)
    for split in ("test_ood", "test_id"):
        table = compare_runs(gather_reports(layout, split))
        csv_path = config.output_dir / f"ablation-{config.digest()[:12]}-{split}.csv"
        csv_path.write_text(comparison_csv(table), encoding="utf-8")
        write_json(csv_path.with_suffix(".json"), table)
        if split == "test_ood":
            print(f"ablation grid finished in {time.perf_counter() - t0:.1f}s (test_ood):")
            _print_table(table)
            print(f"tables written to {csv_path} and its .json twin")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_checks()
    for res in results:
        print(res.line())
    elapsed = time.perf_counter() - t0
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {elapsed:.1f}s")
    return 1 if failed else 0


def _dataset_for_run(run_dir: Path, cache: dict):
    with open(run_dir / "config.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    data_dir = meta["dataset_dir"]
    if data_dir not in cache:
        cache[data_dir] = load_dataset(data_dir)
    return meta, cache[data_dir]


def cmd_report(args) -> int:
    run_dirs = [Path(p) for p in args.run_dirs]
    cache = {}
    labels = {}
    tv_by_label = {}
    for run_dir in run_dirs:
        meta, dataset = _dataset_for_run(run_dir, cache)
        labels[run_dir] = meta["strategy_label"]
        for split in ("test_ood", "test_id"):
            with open(run_dir / f"predictions_{split}.json", encoding="utf-8") as fh:
                preds = np.asarray(json.load(fh), dtype=np.int64)
            patterns = [args.pattern] if args.pattern else None
            dist = distribution_report(preds, dataset.splits[split],
                                       dataset.splits["train"], len(dataset.answers),
                                       patterns=patterns)
            write_json(run_dir / f"distribution_{split}.json", dist)
            if split == "test_ood":
                tvs = [entry["tv_predictions_vs_truth"] for entry in dist.values()]
                tv_by_label.setdefault(meta["strategy_label"], []).append(float(np.mean(tvs)))
        print(f"{run_dir}: distribution histograms written")

    reports = [dict(load_run_report(d, "test_ood"), strategy_label=labels[d])
               for d in run_dirs]
    table = compare_runs(reports)
    out_dir = run_dirs[0].parent
    csv_path = out_dir / "report_comparison.csv"
    csv_path.write_text(comparison_csv(table), encoding="utf-8")
    tv_summary = {label: float(np.mean(vals)) for label, vals in tv_by_label.items()}
    write_json(out_dir / "report_tv_summary.json", tv_summary)
    _print_table(table)
    print("mean prediction-vs-truth total variation on test_ood:")
    for label, value in sorted(tv_summary.items(), key=lambda kv: kv[1]):
        print(f"  {label:<28s} {value:.4f}")
    print(f"comparison written to {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rubi-bench",
        description="bias-reduction training lab on a synthetic changing-priors benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the three dataset splits")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one or more seeds of the configured strategy")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", help="run the 9-cell strategy/sampler grid")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all primitives and loss paths")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="emit distribution histograms and a comparison table")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--pattern", help="restrict histograms to one pattern, e.g. color:3")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, RunExistsError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
