"""Optimization loop: Adam with a linear-warmup / step-decay schedule,
per-epoch evaluation on both test splits, and binary checkpoints.

Every step zeroes gradients once, runs the strategy's forward, performs one
backward sweep per loss term, and takes a single Adam step over the
parameters the strategy trains.  Runs are bit-reproducible from the config
seed: initialization, sampling, and evaluation order all derive from it.
"""

from __future__ import annotations

import struct
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset, SplitArrays, make_sampler
from .layers import seeded_rng
from .model import ModelSizes, VqaModel
from .strategy import (
    QuestionOnlyBranch,
    StrategyConfig,
    backward_and_route,
    forward_losses,
    predict_logits_for_strategy,
)
from .tensor import reset_graph

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingError",
    "CheckpointError",
    "lr_at",
    "adam_step",
    "trainable_parameters",
    "train",
    "evaluate_predictions",
    "save_checkpoint",
    "load_checkpoint",
    "apply_checkpoint",
]


class TrainingError(RuntimeError):
    """Aborted run: non-finite loss or gradient, with location diagnostics."""


class CheckpointError(ValueError):
    """Rejected checkpoint file (truncation, shape or digest mismatch)."""


@dataclass
class TrainConfig:
    seed: int
    base_lr: float = 1.5e-4
    peak_lr: float = 6e-4
    warmup_epochs: int = 7
    decay_start_epoch: int = 14
    decay_factor: float = 0.25
    decay_every: int = 2
    batch_size: int = 256
    epochs: int = 22
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sampler: str = "standard"
    strategy: StrategyConfig = field(default_factory=StrategyConfig)

    def __post_init__(self):
        if isinstance(self.strategy, dict):
            self.strategy = StrategyConfig(**self.strategy)
        if self.peak_lr < self.base_lr:
            raise ValueError(f"peak_lr {self.peak_lr} < base_lr {self.base_lr}")
        for name in ("base_lr", "peak_lr", "decay_factor", "decay_every",
                     "batch_size", "epochs", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.warmup_epochs < 0 or self.decay_start_epoch < 0:
            raise ValueError("schedule epochs must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must be in [0, 1)")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear warmup to peak_lr at warmup_epochs, plateau, then multiply by
    decay_factor at decay_start_epoch and every decay_every epochs after."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        return config.base_lr + (config.peak_lr - config.base_lr) * frac
    if epoch < config.decay_start_epoch:
        return config.peak_lr
    applications = 1 + (epoch - config.decay_start_epoch) // config.decay_every
    return config.peak_lr * config.decay_factor ** applications


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(named_params, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Standard bias-corrected Adam update, in place; t increments once per
    call even when every gradient is zero."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    state.t += 1
    t = state.t
    for name, p in named_params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.mark_dirty()


def trainable_parameters(model: VqaModel, branch: QuestionOnlyBranch,
                         strategy: StrategyConfig):
    """The parameters a strategy is allowed to move.

    classical trains the base model only (branch stays at initialization);
    rubi trains base model + branch; question_only trains the question
    encoder plus the branch, leaving the visual tower untouched.
    """
    if strategy.strategy == "classical":
        return model.named_parameters()
    if strategy.strategy == "rubi":
        return model.named_parameters() + branch.named_parameters()
    return model.encoder_parameters() + branch.named_parameters()


def build_model_and_branch(sizes: ModelSizes, seed: int):
    rng = seeded_rng(seed)
    model = VqaModel(sizes, rng)
    branch = QuestionOnlyBranch(sizes.d_q, sizes.answer_count, sizes.nnq_hidden, rng)
    return model, branch


def evaluate_predictions(model, branch, arrays: SplitArrays,
                         strategy: StrategyConfig, batch_size: int) -> np.ndarray:
    """Argmax predictions over a split, in deterministic batch order."""
    preds = np.empty(arrays.n, dtype=np.int64)
    for start in range(0, arrays.n, batch_size):
        idx = np.arange(start, min(start + batch_size, arrays.n))
        logits = predict_logits_for_strategy(
            model, branch, arrays.regions[idx], [arrays.tokens[i] for i in idx], strategy)
        preds[idx] = np.argmax(logits, axis=1)
    return preds


def train(model: VqaModel, branch: QuestionOnlyBranch, dataset: Dataset,
          config: TrainConfig) -> dict:
    """Run the full schedule and return the per-epoch RunLog dict."""
    strategy = config.strategy
    params = trainable_parameters(model, branch, strategy)
    state = AdamState()
    train_arrays = SplitArrays(dataset.splits["train"])
    eval_arrays = {s: SplitArrays(dataset.splits[s]) for s in ("test_id", "test_ood")}
    sampler = make_sampler(config.sampler, dataset.splits["train"], config.seed, config.batch_size)

    epochs_log = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config)
        sums = {"l_qm": 0.0, "l_qo": 0.0, "l_rubi": 0.0}
        correct = 0
        seen = 0
        for step, idx in enumerate(sampler.epoch(epoch)):
            reset_graph()
            for _, p in params:
                p.zero_grad()
            batch = train_arrays.batch(idx)
            losses, scored_logits = forward_losses(model, branch, batch, strategy)
            if not np.isfinite(losses.l_rubi.data).all():
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
            backward_and_route(losses, strategy)
            adam_step(params, {name: p.grad for name, p in params}, state, lr,
                      config.beta1, config.beta2, config.adam_eps)
            sums["l_qm"] += losses.l_qm.item() * len(idx)
            sums["l_qo"] += losses.l_qo.item() * len(idx)
            sums["l_rubi"] += losses.l_rubi.item() * len(idx)
            correct += int((np.argmax(scored_logits.data, axis=1) == batch.answers).sum())
            seen += len(idx)
        reset_graph()

        record = {
            "epoch": epoch,
            "lr": lr,
            "mean_l_qm": sums["l_qm"] / seen,
            "mean_l_qo": sums["l_qo"] / seen,
            "mean_l_rubi": sums["l_rubi"] / seen,
            "train_accuracy": correct / seen,
        }
        for split, arrays in eval_arrays.items():
            preds = evaluate_predictions(model, branch, arrays, strategy, config.batch_size)
            record[f"{split}_accuracy"] = float((preds == arrays.answers).mean())
        record["seconds"] = time.perf_counter() - t0
        epochs_log.append(record)

    return {"epochs": epochs_log, "final": dict(epochs_log[-1]) if epochs_log else {}}


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, flat little-endian f64
# ---------------------------------------------------------------------------

_MAGIC = b"RBCK\x01\n"


def save_checkpoint(named_params, path, digest: str):
    path = Path(path)
    header = {
        "digest": digest,
        "params": [{"name": name, "shape": list(p.data.shape)} for name, p in named_params],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for _, p in named_params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, expected_digest: str | None = None):
    """Returns (digest, {name: array}); rejects truncated files and digest
    mismatches."""
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    if len(blob) < off + 4:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise CheckpointError(f"{path}: truncated header ({len(blob)} bytes, need {off + hlen})")
    header = json.loads(blob[off:off + hlen].decode("utf-8"))
    off += hlen
    expected = sum(int(np.prod(e["shape"])) for e in header["params"]) * 8
    actual = len(blob) - off
    if actual != expected:
        raise CheckpointError(f"{path}: payload is {actual} bytes, expected {expected}")
    if expected_digest is not None and header["digest"] != expected_digest:
        raise CheckpointError(
            f"{path}: config digest mismatch ({header['digest']} != {expected_digest})")
    values = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        values[entry["name"]] = arr.astype(np.float64)
        off += count * 8
    return header["digest"], values


def apply_checkpoint(named_params, values: dict):
    """Load checkpoint arrays into parameter tensors, shape-checked."""
    for name, p in named_params:
        if name not in values:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = values[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"checkpoint shape mismatch for {name!r}: {arr.shape} != {p.data.shape}")
        p.data = arr.copy()
        p.mark_dirty()
