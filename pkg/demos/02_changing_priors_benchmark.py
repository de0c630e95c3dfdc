"""Build a small changing-priors corpus and inspect the shortcut it plants.

Each (family, object) question pattern has one majority answer carrying 80%
of the training mass; the OOD test split moves that mass to a different
answer.  A model that memorizes the question-answer shortcut aces train and
collapses on test_ood, even though every image fully determines its answer.
"""

import numpy as np

from rubi_bench.datagen import DatasetSpec, bias_audit, generate

spec = DatasetSpec(seed=7, n_train=4000, n_test_id=1000, n_test_ood=1000)
dataset = generate(spec)

print(f"answers: {dataset.answers}")
print(f"vocab ({len(dataset.vocab)} words): {dataset.vocab}\n")

example = dataset.splits["train"][0]
print("one example:")
print("  question tokens:", [dataset.vocab[t] for t in example.tokens])
print("  answer:", dataset.answers[example.answer])
print("  regions shape:", example.regions.shape, "\n")

print("train-split bias audit (top 6 patterns by majority share):")
rows = bias_audit(dataset.splits["train"], dataset.answers)
for row in rows[:6]:
    print(f"  {row['pattern']:<10s} n={row['count']:<4d} majority={row['majority_answer']:<8s}"
          f" share={row['majority_share']:.2f} entropy={row['entropy']:.2f}")

print("\nsame patterns on test_ood (majorities swapped):")
ood_rows = {r["pattern"]: r for r in bias_audit(dataset.splits["test_ood"], dataset.answers)}
for row in rows[:6]:
    ood = ood_rows[row["pattern"]]
    print(f"  {row['pattern']:<10s} majority={ood['majority_answer']:<8s}"
          f" share={ood['majority_share']:.2f}")

# the shortcut's ceiling: predict each pattern's training majority
preds = [dataset.priors.a_maj[ex.pattern.key()] for ex in dataset.splits["test_ood"]]
hit = np.mean([p == ex.answer for p, ex in zip(preds, dataset.splits["test_ood"])])
print(f"\ntrain-majority predictor on test_ood: {hit:.3f} "
      "(the shortcut is worthless after the shift)")
