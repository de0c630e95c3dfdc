"""Compare mask activations and combination rules on one small corpus.

The sigmoid/product combination is the designed default; swapping in a relu
or an element-wise sum degrades the out-of-distribution gain, which is the
point of the ablation.
"""

from rubi_bench.datagen import DatasetSpec, generate
from rubi_bench.model import ModelSizes
from rubi_bench.strategy import StrategyConfig
from rubi_bench.trainer import TrainConfig, build_model_and_branch, train

spec = DatasetSpec(seed=9, n_train=6000, n_test_id=1200, n_test_ood=1200)
dataset = generate(spec)
sizes = ModelSizes(d_raw=spec.d_raw, n_v=spec.n_v,
                   vocab_size=len(dataset.vocab), answer_count=len(dataset.answers))

variants = (
    ("sigmoid * product", StrategyConfig(strategy="rubi")),
    ("relu    * product", StrategyConfig(strategy="rubi", mask_activation="relu")),
    ("sigmoid + sum    ", StrategyConfig(strategy="rubi", combine="sum")),
    ("no question-only loss", StrategyConfig(strategy="rubi", use_qo_loss=False)),
)

print(f"{'variant':<24s} {'test_id':>8s} {'test_ood':>9s}")
for label, strategy in variants:
    model, branch = build_model_and_branch(sizes, seed=2)
    log = train(model, branch, dataset, TrainConfig(seed=2, strategy=strategy))
    final = log["final"]
    print(f"{label:<24s} {final['test_id_accuracy']:>8.3f} {final['test_ood_accuracy']:>9.3f}")
