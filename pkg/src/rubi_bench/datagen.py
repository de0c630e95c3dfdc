"""Synthetic region-and-question corpus with per-pattern answer priors that
change between the train and OOD test splits.

Every example is a scene of n_v regions (object one-hot + color one-hot +
noise dims) and a templated question about one object.  Three question
families cover the three classic answer types: color questions ("Other"),
existence questions ("Yes/No") and count questions ("Number").  The train
split ties each (family, object) pattern to a majority answer with
probability b; the OOD split moves that mass to a different answer (swap
mode) or flattens it (uniform mode).  Scenes are always constructed to be
consistent with the sampled answer, so the visual signal is sufficient for
every example and only the question-answer shortcut breaks under the shift.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

__all__ = [
    "DatasetSpec",
    "QuestionPattern",
    "Example",
    "PriorTable",
    "Dataset",
    "Batch",
    "SplitArrays",
    "FAMILIES",
    "SPLITS",
    "build_priors",
    "generate",
    "make_sampler",
    "BatchSampler",
    "bias_audit",
    "save_dataset",
    "load_dataset",
]

FAMILIES = ("color", "exist", "count")
SPLITS = ("train", "test_id", "test_ood")
OOD_MODES = ("swap", "uniform")

COLOR_WORDS = ("red", "blue", "green", "yellow", "black", "white",
               "orange", "purple", "brown", "pink", "gray", "cyan")
OBJECT_WORDS = ("apple", "ball", "cat", "dog", "egg", "fish", "goat", "hat",
                "ink", "jar", "kite", "lamp", "mug", "net", "owl", "pen")

# substream tags so each purpose gets an independent deterministic stream
_STREAM_PRIORS = 0
_STREAM_SPLIT = {"train": 1, "test_id": 2, "test_ood": 3}


@dataclass
class DatasetSpec:
    seed: int
    n_objects: int = 12
    n_colors: int = 6
    max_count: int = 4
    n_v: int = 8
    n_noise_dims: int = 4
    noise_sigma: float = 0.1
    bias_strength: float = 0.8
    n_train: int = 20000
    n_test_id: int = 5000
    n_test_ood: int = 5000
    ood_mode: str = "swap"

    def __post_init__(self):
        if self.ood_mode not in OOD_MODES:
            raise ValueError(f"ood_mode must be one of {OOD_MODES}, got {self.ood_mode!r}")
        for name in ("n_objects", "n_colors", "max_count", "n_v", "n_train",
                     "n_test_id", "n_test_ood"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DatasetSpec.{name} must be positive")
        if self.n_noise_dims < 0 or self.noise_sigma < 0:
            raise ValueError("noise settings must be non-negative")
        if self.max_count > self.n_v:
            raise ValueError(
                f"max_count {self.max_count} > n_v {self.n_v}: count scenes would be impossible")
        if self.n_colors > len(COLOR_WORDS) or self.n_objects > len(OBJECT_WORDS):
            raise ValueError("n_colors/n_objects exceed the built-in word lists")
        if not 0 < self.bias_strength <= 1:
            raise ValueError(f"bias_strength must be in (0, 1], got {self.bias_strength}")

    @property
    def d_raw(self) -> int:
        return self.n_objects + self.n_colors + self.n_noise_dims

    def answers(self) -> list:
        """Global answer list: colors, then counts 0..max_count, then yes/no."""
        return (list(COLOR_WORDS[: self.n_colors])
                + [str(k) for k in range(self.max_count + 1)]
                + ["yes", "no"])

    def family_domain(self, family: str) -> np.ndarray:
        """Global answer indices a family's questions can take."""
        if family == "color":
            return np.arange(self.n_colors)
        if family == "count":
            return np.arange(self.n_colors, self.n_colors + self.max_count + 1)
        if family == "exist":
            base = self.n_colors + self.max_count + 1
            return np.arange(base, base + 2)
        raise ValueError(f"unknown family {family!r}")

    def vocab(self) -> list:
        words = {"what", "color", "is", "the", "there", "a", "how", "many"}
        words.update(OBJECT_WORDS[: self.n_objects])
        return sorted(words)

    def question_tokens(self, family: str, obj: int) -> np.ndarray:
        vocab = {w: i for i, w in enumerate(self.vocab())}
        obj_word = OBJECT_WORDS[obj]
        if family == "color":
            words = ("what", "color", "is", "the", obj_word)
        elif family == "exist":
            words = ("is", "there", "a", obj_word)
        elif family == "count":
            words = ("how", "many", obj_word)
        else:
            raise ValueError(f"unknown family {family!r}")
        return np.array([vocab[w] for w in words], dtype=np.int64)

    def patterns(self) -> list:
        return [QuestionPattern(family, obj)
                for family in FAMILIES for obj in range(self.n_objects)]


@dataclass(frozen=True)
class QuestionPattern:
    family: str
    obj: int

    def key(self) -> str:
        return f"{self.family}:{self.obj}"


@dataclass
class Example:
    regions: np.ndarray  # (n_v, d_raw)
    tokens: np.ndarray   # question token ids
    answer: int          # global answer index
    family: str
    obj: int

    @property
    def pattern(self) -> QuestionPattern:
        return QuestionPattern(self.family, self.obj)


@dataclass
class PriorTable:
    """Per (split, pattern) categorical answer distributions plus the
    designated majority/alternative answer of each pattern."""

    domains: dict = field(default_factory=dict)  # pattern key -> np.ndarray of answer ids
    a_maj: dict = field(default_factory=dict)    # pattern key -> answer id
    a_alt: dict = field(default_factory=dict)
    probs: dict = field(default_factory=dict)    # (split, pattern key) -> np.ndarray over domain

    def prob(self, split: str, pattern: QuestionPattern) -> np.ndarray:
        return self.probs[(split, pattern.key())]

    def to_json(self) -> dict:
        out = []
        for key, domain in self.domains.items():
            out.append({
                "pattern": key,
                "domain": domain.tolist(),
                "a_maj": int(self.a_maj[key]),
                "a_alt": int(self.a_alt[key]),
                "probs": {split: self.probs[(split, key)].tolist() for split in SPLITS},
            })
        return {"patterns": out}

    @classmethod
    def from_json(cls, payload: dict) -> "PriorTable":
        table = cls()
        for entry in payload["patterns"]:
            key = entry["pattern"]
            table.domains[key] = np.asarray(entry["domain"], dtype=np.int64)
            table.a_maj[key] = int(entry["a_maj"])
            table.a_alt[key] = int(entry["a_alt"])
            for split in SPLITS:
                table.probs[(split, key)] = np.asarray(entry["probs"][split], dtype=np.float64)
        return table


@dataclass
class Dataset:
    spec: DatasetSpec
    priors: PriorTable
    vocab: list
    answers: list
    splits: dict  # split name -> list[Example]


def build_priors(spec: DatasetSpec) -> PriorTable:
    """Draw (a_maj, a_alt) per pattern and lay out the three split priors.

    Train and test_id share the biased prior (mass b on a_maj, rest
    uniform); test_ood either swaps the mass onto a_alt or goes uniform.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, _STREAM_PRIORS])))
    table = PriorTable()
    for pattern in spec.patterns():
        domain = spec.family_domain(pattern.family)
        k = len(domain)
        if spec.bias_strength <= 1.0 / k:
            raise ValueError(
                f"no majority exists: bias_strength {spec.bias_strength} <= uniform mass "
                f"1/{k} for family {pattern.family!r}")
        maj_pos = int(rng.integers(k))
        alt_pos = int(rng.integers(k - 1))
        if alt_pos >= maj_pos:
            alt_pos += 1
        key = pattern.key()
        table.domains[key] = domain
        table.a_maj[key] = int(domain[maj_pos])
        table.a_alt[key] = int(domain[alt_pos])

        b = spec.bias_strength
        rest = (1.0 - b) / (k - 1) if k > 1 else 0.0
        biased = np.full(k, rest)
        biased[maj_pos] = b
        table.probs[("train", key)] = biased
        table.probs[("test_id", key)] = biased.copy()
        if spec.ood_mode == "swap":
            swapped = np.full(k, rest)
            swapped[alt_pos] = b
            table.probs[("test_ood", key)] = swapped
        else:
            table.probs[("test_ood", key)] = np.full(k, 1.0 / k)
    return table


def _make_scene(spec: DatasetSpec, family: str, obj: int, answer: int,
                answers: list, rng: np.random.Generator) -> np.ndarray:
    """Region list consistent with (family, obj, answer); answer is always
    recoverable from the clean one-hot components."""
    slots = []  # (object id, color id)

    def distractor():
        other = int(rng.integers(spec.n_objects - 1))
        if other >= obj:
            other += 1
        return other, int(rng.integers(spec.n_colors))

    if family == "color":
        slots.append((obj, answer))  # color ids coincide with global ids
        slots.extend(distractor() for _ in range(spec.n_v - 1))
    elif family == "exist":
        if answers[answer] == "yes":
            slots.append((obj, int(rng.integers(spec.n_colors))))
            slots.extend(distractor() for _ in range(spec.n_v - 1))
        else:
            slots.extend(distractor() for _ in range(spec.n_v))
    elif family == "count":
        k = int(answers[answer])
        for _ in range(k):
            slots.append((obj, int(rng.integers(spec.n_colors))))
        slots.extend(distractor() for _ in range(spec.n_v - k))
    else:
        raise ValueError(f"unknown family {family!r}")

    order = rng.permutation(spec.n_v)
    regions = np.zeros((spec.n_v, spec.d_raw))
    for row, slot in zip(order, slots):
        o, c = slot
        regions[row, o] = 1.0
        regions[row, spec.n_objects + c] = 1.0
    if spec.noise_sigma > 0:
        regions += rng.normal(0.0, spec.noise_sigma, size=regions.shape)
    return regions


def generate(spec: DatasetSpec) -> Dataset:
    """Generate all three splits, reproducibly from the spec seed.

    Each example draws from its own seeded stream keyed by (seed, split,
    index), so generation is order-independent and parallelizable by index.
    """
    priors = build_priors(spec)
    answers = spec.answers()
    vocab = spec.vocab()
    sizes = {"train": spec.n_train, "test_id": spec.n_test_id, "test_ood": spec.n_test_ood}
    token_cache = {(f, o): spec.question_tokens(f, o)
                   for f in FAMILIES for o in range(spec.n_objects)}

    splits = {}
    for split, n in sizes.items():
        stream = _STREAM_SPLIT[split]
        examples = []
        for index in range(n):
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([spec.seed, stream, index])))
            family = FAMILIES[int(rng.integers(len(FAMILIES)))]
            obj = int(rng.integers(spec.n_objects))
            pattern = QuestionPattern(family, obj)
            domain = priors.domains[pattern.key()]
            probs = priors.prob(split, pattern)
            answer = int(rng.choice(domain, p=probs))
            regions = _make_scene(spec, family, obj, answer, answers, rng)
            examples.append(Example(regions=regions, tokens=token_cache[(family, obj)],
                                    answer=answer, family=family, obj=obj))
        splits[split] = examples
    return Dataset(spec=spec, priors=priors, vocab=vocab, answers=answers, splits=splits)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    regions: np.ndarray  # (b, n_v, d_raw)
    tokens: list         # b token-id arrays
    answers: np.ndarray  # (b,)


class SplitArrays:
    """Split stacked into arrays for fast batch slicing."""

    def __init__(self, examples):
        self.regions = np.stack([ex.regions for ex in examples])
        self.tokens = [ex.tokens for ex in examples]
        self.answers = np.array([ex.answer for ex in examples], dtype=np.int64)
        self.families = [ex.family for ex in examples]
        self.objects = np.array([ex.obj for ex in examples], dtype=np.int64)
        self.n = len(examples)

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(regions=self.regions[idx],
                     tokens=[self.tokens[i] for i in idx],
                     answers=self.answers[idx])


SAMPLER_STRATEGIES = ("standard", "answer_balanced", "qtype_balanced")


class BatchSampler:
    """Epoch-sized batch index streams for the three sampling baselines.

    standard draws a permutation (every example exactly once per epoch);
    answer_balanced draws answers uniformly over the observed answers, then
    a uniform example with that answer (with replacement); qtype_balanced
    keeps the empirical pattern frequencies but uniformizes answers within
    each pattern (with replacement).
    """

    def __init__(self, examples, strategy: str, seed: int, batch_size: int):
        if strategy not in SAMPLER_STRATEGIES:
            raise ValueError(f"sampler must be one of {SAMPLER_STRATEGIES}, got {strategy!r}")
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self.strategy = strategy
        self.seed = seed
        self.batch_size = batch_size
        self.n = len(examples)

        answers = np.array([ex.answer for ex in examples], dtype=np.int64)
        self.answer_values = np.unique(answers)
        self.by_answer = [np.flatnonzero(answers == a) for a in self.answer_values]

        keys = [ex.pattern.key() for ex in examples]
        self.pattern_keys = sorted(set(keys))
        key_pos = {k: i for i, k in enumerate(self.pattern_keys)}
        pattern_of = np.array([key_pos[k] for k in keys], dtype=np.int64)
        self.pattern_freq = np.bincount(pattern_of, minlength=len(self.pattern_keys)) / self.n
        self.cells = []  # per pattern: list of index arrays, one per observed answer
        for p in range(len(self.pattern_keys)):
            in_pattern = np.flatnonzero(pattern_of == p)
            observed = np.unique(answers[in_pattern])
            cell = [in_pattern[answers[in_pattern] == a] for a in observed]
            if any(len(c) == 0 for c in cell):
                raise RuntimeError(f"empty (pattern, answer) cell in {self.pattern_keys[p]}")
            self.cells.append(cell)

    def epoch(self, epoch_index: int):
        """Yield index arrays covering one epoch (n draws)."""
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, epoch_index])))
        if self.strategy == "standard":
            order = rng.permutation(self.n)
        elif self.strategy == "answer_balanced":
            which = rng.integers(len(self.answer_values), size=self.n)
            u = rng.random(self.n)
            order = np.empty(self.n, dtype=np.int64)
            for i in range(self.n):
                cell = self.by_answer[which[i]]
                order[i] = cell[int(u[i] * len(cell))]
        else:  # qtype_balanced
            pats = rng.choice(len(self.pattern_keys), size=self.n, p=self.pattern_freq)
            u_ans = rng.random(self.n)
            u_ex = rng.random(self.n)
            order = np.empty(self.n, dtype=np.int64)
            for i in range(self.n):
                cell_list = self.cells[pats[i]]
                cell = cell_list[int(u_ans[i] * len(cell_list))]
                order[i] = cell[int(u_ex[i] * len(cell))]
        for start in range(0, self.n, self.batch_size):
            yield order[start:start + self.batch_size]

    def batches_per_epoch(self) -> int:
        return (self.n + self.batch_size - 1) // self.batch_size


def make_sampler(strategy: str, examples, seed: int, batch_size: int) -> BatchSampler:
    return BatchSampler(examples, strategy, seed, batch_size)


# ---------------------------------------------------------------------------
# auditing
# ---------------------------------------------------------------------------


def bias_audit(examples, answers) -> list:
    """Empirical per-pattern answer statistics, sorted by majority share
    descending: counts, majority answer and share, natural-log entropy."""
    if not examples:
        raise ValueError("bias_audit: empty split")
    groups = {}
    for ex in examples:
        groups.setdefault(ex.pattern.key(), []).append(ex.answer)
    rows = []
    for key, answer_list in groups.items():
        counts = np.bincount(np.asarray(answer_list), minlength=len(answers))
        total = counts.sum()
        p = counts[counts > 0] / total
        entropy = float(-(p * np.log(p)).sum())
        maj = int(np.argmax(counts))
        rows.append({
            "pattern": key,
            "count": int(total),
            "majority_answer": answers[maj],
            "majority_share": float(counts[maj] / total),
            "entropy": entropy,
        })
    rows.sort(key=lambda r: (-r["majority_share"], r["pattern"]))
    return rows


# ---------------------------------------------------------------------------
# files: one JSONL per split plus a sidecar with spec/priors/vocab/answers
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, examples in dataset.splits.items():
        path = out_dir / f"{split}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for ex in examples:
                line = json.dumps({
                    "regions": ex.regions.tolist(),
                    "tokens": ex.tokens.tolist(),
                    "answer": int(ex.answer),
                    "family": ex.family,
                    "object": int(ex.obj),
                }, separators=(",", ":"))
                fh.write(line + "\n")
        paths[split] = path
    sidecar = out_dir / "dataset.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({
            "spec": asdict(dataset.spec),
            "priors": dataset.priors.to_json(),
            "vocab": dataset.vocab,
            "answers": dataset.answers,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["sidecar"] = sidecar
    return paths


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    sidecar = data_dir / "dataset.json"
    if not sidecar.exists():
        raise FileNotFoundError(f"missing dataset sidecar {sidecar}")
    with open(sidecar, encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = DatasetSpec(**meta["spec"])
    priors = PriorTable.from_json(meta["priors"])
    splits = {}
    for split in SPLITS:
        path = data_dir / f"{split}.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"missing split file {path}")
        examples = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                examples.append(Example(
                    regions=np.asarray(row["regions"], dtype=np.float64),
                    tokens=np.asarray(row["tokens"], dtype=np.int64),
                    answer=int(row["answer"]),
                    family=row["family"],
                    obj=int(row["object"]),
                ))
        splits[split] = examples
    return Dataset(spec=spec, priors=priors, vocab=meta["vocab"],
                   answers=meta["answers"], splits=splits)
