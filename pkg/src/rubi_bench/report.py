"""Accuracy metrics with per-answer-family breakdown, answer-distribution
histograms, and multi-run comparison tables.

The three question families map onto the classic answer-type columns:
exist -> yes_no, count -> number, color -> other.  The synthetic corpus has a
single ground-truth answer per example, so the headline metric is top-1
exact match; the multi-annotator soft metric is provided for conformance but
unused by default.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

__all__ = [
    "FAMILY_COLUMNS",
    "RunReport",
    "accuracy",
    "soft_accuracy",
    "build_run_report",
    "distribution_report",
    "total_variation",
    "compare_runs",
    "comparison_csv",
]

FAMILY_COLUMNS = {"exist": "yes_no", "count": "number", "color": "other"}
COLUMNS = ("overall", "yes_no", "number", "other")


def accuracy(predictions, examples) -> dict:
    """Top-1 exact-match rate, overall and per answer family.

    Families absent from the split are omitted from the result rather than
    reported as zero.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    if len(predictions) != len(examples):
        raise ValueError(
            f"accuracy: {len(predictions)} predictions for {len(examples)} examples")
    truth = np.array([ex.answer for ex in examples], dtype=np.int64)
    hits = predictions == truth
    per_family = {}
    for family, column in FAMILY_COLUMNS.items():
        sel = np.array([ex.family == family for ex in examples])
        if sel.any():
            per_family[column] = float(hits[sel].mean())
    return {"overall": float(hits.mean()), "per_family": per_family, "n": len(examples)}


def soft_accuracy(prediction: int, annotator_answers) -> float:
    """min(#annotators giving the predicted answer / 3, 1) — the standard
    multi-annotator form; degenerates to exact match when all agree."""
    annotator_answers = list(annotator_answers)
    if not annotator_answers:
        raise ValueError("soft_accuracy: needs at least one annotator answer")
    matches = sum(1 for a in annotator_answers if a == prediction)
    return min(matches / 3.0, 1.0)


@dataclass
class RunReport:
    split: str
    strategy_label: str
    config_digest: str
    seed: int
    overall: float
    per_family: dict
    n: int
    pattern_histograms: dict  # pattern key -> prediction counts over answers
    loss_traces: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def build_run_report(predictions, examples, n_answers: int, *, split: str,
                     strategy_label: str, config_digest: str, seed: int,
                     loss_traces: dict | None = None) -> RunReport:
    acc = accuracy(predictions, examples)
    hists = {}
    for pred, ex in zip(predictions, examples):
        key = ex.pattern.key()
        if key not in hists:
            hists[key] = [0] * n_answers
        hists[key][int(pred)] += 1
    return RunReport(split=split, strategy_label=strategy_label,
                     config_digest=config_digest, seed=seed,
                     overall=acc["overall"], per_family=acc["per_family"], n=acc["n"],
                     pattern_histograms=hists, loss_traces=loss_traces or {})


def total_variation(counts_a, counts_b) -> float:
    """Half the L1 distance between two normalized count histograms."""
    a = np.asarray(counts_a, dtype=np.float64)
    b = np.asarray(counts_b, dtype=np.float64)
    if a.sum() <= 0 or b.sum() <= 0:
        raise ValueError("total_variation: histograms must be non-empty")
    return float(0.5 * np.abs(a / a.sum() - b / b.sum()).sum())


def distribution_report(predictions, split_examples, train_examples,
                        n_answers: int, patterns=None) -> dict:
    """Per-pattern answer histograms: train ground truth, model predictions
    on the split, split ground truth, plus the prediction-vs-truth total
    variation distance."""
    predictions = np.asarray(predictions, dtype=np.int64)
    if len(predictions) != len(split_examples):
        raise ValueError("distribution_report: one prediction per example required")

    def hist_by_pattern(pairs):
        out = {}
        for key, value in pairs:
            out.setdefault(key, np.zeros(n_answers, dtype=np.int64))[value] += 1
        return out

    train_h = hist_by_pattern((ex.pattern.key(), ex.answer) for ex in train_examples)
    truth_h = hist_by_pattern((ex.pattern.key(), ex.answer) for ex in split_examples)
    pred_h = hist_by_pattern(
        (ex.pattern.key(), int(p)) for ex, p in zip(split_examples, predictions))

    available = sorted(truth_h)
    if patterns is None:
        patterns = available
    else:
        patterns = list(patterns)
        unknown = [p for p in patterns if p not in truth_h]
        if unknown:
            raise ValueError(f"distribution_report: unknown patterns {unknown}")

    report = {}
    for key in patterns:
        report[key] = {
            "train": train_h.get(key, np.zeros(n_answers, dtype=np.int64)).tolist(),
            "predictions": pred_h[key].tolist(),
            "ground_truth": truth_h[key].tolist(),
            "tv_predictions_vs_truth": total_variation(pred_h[key], truth_h[key]),
        }
    return report


def compare_runs(reports) -> list:
    """Aggregate RunReports (or their dicts) into one table.

    Rows are strategy labels; cells are mean +/- sample standard deviation
    over seeds for each accuracy column; rows sort by overall mean
    descending.  Mixing reports from different splits is an error.
    """
    rows = {}
    split_names = set()
    for rep in reports:
        data = rep.to_json() if isinstance(rep, RunReport) else dict(rep)
        split_names.add(data["split"])
        rows.setdefault(data["strategy_label"], []).append(data)
    if len(split_names) > 1:
        raise ValueError(f"compare_runs: mixed splits in one table: {sorted(split_names)}")

    def mean_std(values):
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return float(arr.mean()), std

    table = []
    for label, group in rows.items():
        row = {"strategy": label, "n_runs": len(group), "split": next(iter(split_names))}
        row["overall_mean"], row["overall_std"] = mean_std([g["overall"] for g in group])
        for column in COLUMNS[1:]:
            values = [g["per_family"][column] for g in group if column in g["per_family"]]
            if values:
                row[f"{column}_mean"], row[f"{column}_std"] = mean_std(values)
            else:
                row[f"{column}_mean"] = row[f"{column}_std"] = None
        table.append(row)
    table.sort(key=lambda r: -r["overall_mean"])
    return table


def comparison_csv(table) -> str:
    """Render a compare_runs table as CSV (UTF-8 text, header row,
    '.' decimal separator)."""
    fields = ["strategy", "split", "n_runs"]
    for column in COLUMNS:
        fields += [f"{column}_mean", f"{column}_std"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields)
    writer.writeheader()
    for row in table:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fields})
    return buf.getvalue()


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
