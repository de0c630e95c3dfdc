"""Run configuration files: one JSON document with dataset, model, train and
strategy sections plus an output directory.

Every field has a default except the top-level seed.  Unknown keys are
rejected so typos cannot silently fall back to defaults.  The config digest
(sha256 of the resolved document, minus seed and output location) names runs
and guards checkpoints against mismatched layer sizes or datasets.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .datagen import DatasetSpec
from .model import ModelSizes
from .strategy import StrategyConfig
from .trainer import TrainConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "config_from_dict"]

OUTPUT_DIR_ENV = "RUBI_BENCH_OUT"

_DATASET_KEYS = {"n_objects", "n_colors", "max_count", "n_v", "n_noise_dims",
                 "noise_sigma", "bias_strength", "n_train", "n_test_id",
                 "n_test_ood", "ood_mode"}
_MODEL_KEYS = {"d_emb", "d_q", "d_v", "d_h", "d_m", "classifier_hidden", "nnq_hidden"}
_TRAIN_KEYS = {"base_lr", "peak_lr", "warmup_epochs", "decay_start_epoch",
               "decay_factor", "decay_every", "batch_size", "epochs",
               "beta1", "beta2", "adam_eps", "sampler"}
_STRATEGY_KEYS = {"strategy", "mask_activation", "combine", "use_qo_loss"}
_TOP_KEYS = {"seed", "dataset", "model", "train", "strategy", "output_dir"}


class ConfigError(ValueError):
    pass


def _check_keys(section: str, payload: dict, allowed: set):
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")


@dataclass
class RunConfig:
    seed: int
    dataset: DatasetSpec
    model_overrides: dict
    train: TrainConfig
    output_dir: Path

    def model_sizes(self, vocab_size: int, answer_count: int) -> ModelSizes:
        return ModelSizes(d_raw=self.dataset.d_raw, n_v=self.dataset.n_v,
                          vocab_size=vocab_size, answer_count=answer_count,
                          **self.model_overrides)

    def resolved(self) -> dict:
        """Fully-resolved document with defaults applied.  This is the digest
        input: it includes the dataset seed (part of the data's identity) but
        not the per-run training seed or the output location."""
        strategy = self.train.strategy
        return {
            "dataset": {k: getattr(self.dataset, k) for k in sorted(_DATASET_KEYS)}
                       | {"seed": self.dataset.seed},
            "model": {k: self.model_overrides.get(k, _MODEL_DEFAULTS[k])
                      for k in sorted(_MODEL_KEYS)},
            "train": {k: getattr(self.train, k) for k in sorted(_TRAIN_KEYS)},
            "strategy": {k: getattr(strategy, k) for k in sorted(_STRATEGY_KEYS)},
        }

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def run_id(self, seed: int | None = None) -> str:
        seed = self.seed if seed is None else seed
        return f"{self.digest()[:12]}-seed{seed}"

    def dataset_dir(self) -> Path:
        blob = json.dumps(self.resolved()["dataset"], sort_keys=True, separators=(",", ":"))
        tag = hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]
        return self.output_dir / f"data-{tag}"


_MODEL_DEFAULTS = {"d_emb": 32, "d_q": 64, "d_v": None, "d_h": 128, "d_m": 128,
                   "classifier_hidden": [128, 128], "nnq_hidden": [64, 64]}


def config_from_dict(payload: dict, base_dir: Path | None = None) -> RunConfig:
    _check_keys("<top level>", payload, _TOP_KEYS)
    if "seed" not in payload:
        raise ConfigError("config is missing the required 'seed' field")
    seed = payload["seed"]
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    dataset_payload = payload.get("dataset", {})
    _check_keys("dataset", dataset_payload, _DATASET_KEYS)
    try:
        dataset = DatasetSpec(seed=seed, **dataset_payload)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    model_payload = dict(payload.get("model", {}))
    _check_keys("model", model_payload, _MODEL_KEYS)
    for key in ("classifier_hidden", "nnq_hidden"):
        if key in model_payload:
            model_payload[key] = list(model_payload[key])

    train_payload = payload.get("train", {})
    _check_keys("train", train_payload, _TRAIN_KEYS)
    strategy_payload = payload.get("strategy", {})
    _check_keys("strategy", strategy_payload, _STRATEGY_KEYS)
    try:
        strategy = StrategyConfig(**strategy_payload)
        train = TrainConfig(seed=seed, strategy=strategy, **train_payload)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    out = os.environ.get(OUTPUT_DIR_ENV) or payload.get("output_dir", "runs")
    out_path = Path(out)
    if base_dir is not None and not out_path.is_absolute():
        out_path = Path(base_dir) / out_path
    return RunConfig(seed=seed, dataset=dataset, model_overrides=model_payload,
                     train=train, output_dir=out_path)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return config_from_dict(payload, base_dir=path.parent)
