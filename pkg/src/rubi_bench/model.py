"""Base multimodal classifier: region encoder, question encoder, per-region
bilinear fusion with max pooling, and an MLP head over the answer space.

The question encoder is a mean of token embeddings followed by an affine
map; templated questions carry no order information, so the mean keeps
question families distinguishable while staying cheap.  Inference never
touches the question-only branch: the forward path here is the whole model
at test time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Embedding, Linear, LowRankBilinearFusion, Mlp
from .tensor import (
    Tensor,
    ShapeError,
    embedding_lookup,
    matmul,
    max_over_rows,
    no_grad,
    reshape,
)

__all__ = ["ModelSizes", "VqaModel"]


@dataclass
class ModelSizes:
    """Layer dimensions; defaults are the rescaled desk-size topology."""

    d_raw: int
    n_v: int
    vocab_size: int
    answer_count: int
    d_emb: int = 32
    d_q: int = 64
    d_v: int | None = None
    d_h: int = 128
    d_m: int = 128
    classifier_hidden: tuple = (128, 128)
    nnq_hidden: tuple = (64, 64)

    def __post_init__(self):
        if self.d_v is None:
            self.d_v = self.d_raw
        for name in ("d_raw", "n_v", "vocab_size", "answer_count", "d_emb", "d_q", "d_v", "d_h", "d_m"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelSizes.{name} must be positive")
        self.classifier_hidden = tuple(self.classifier_hidden)
        self.nnq_hidden = tuple(self.nnq_hidden)


class VqaModel:
    """classifier(max over regions of fuse(encode_question(q), region_i))."""

    def __init__(self, sizes: ModelSizes, rng: np.random.Generator):
        self.sizes = sizes
        self.e_v = Linear(sizes.d_raw, sizes.d_v, rng)
        self.embed = Embedding(sizes.vocab_size, sizes.d_emb, rng)
        self.q_proj = Linear(sizes.d_emb, sizes.d_q, rng)
        self.fusion = LowRankBilinearFusion(sizes.d_q, sizes.d_v, sizes.d_h, sizes.d_m, rng)
        self.classifier = Mlp((sizes.d_m, *sizes.classifier_hidden, sizes.answer_count), rng)

    # -- encoders --------------------------------------------------------

    def encode_question(self, tokens) -> Tensor:
        """Affine map of the mean of token embeddings, shape (d_q,)."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ShapeError("encode_question: token sequence must be non-empty and 1-d")
        if ids.min() < 0 or ids.max() >= self.sizes.vocab_size:
            raise ShapeError(
                f"encode_question: token id outside vocab of {self.sizes.vocab_size}")
        rows = embedding_lookup(self.embed.table, ids)
        pool = Tensor(np.full((1, ids.size), 1.0 / ids.size))
        mean_emb = matmul(pool, rows)
        return self.q_proj(mean_emb).reshape((self.sizes.d_q,))

    def encode_question_batch(self, token_rows) -> Tensor:
        """Batched question encoding via a bag-of-words mixing matrix.

        Row i of the (b, vocab) matrix holds count/len weights for example
        i's tokens, so the matmul against the embedding table equals the
        per-example mean of embeddings (to fp rounding) while handling
        ragged token lengths in one op.
        """
        b = len(token_rows)
        if b == 0:
            raise ShapeError("encode_question_batch: empty batch")
        bag = np.zeros((b, self.sizes.vocab_size))
        for i, row in enumerate(token_rows):
            ids = np.asarray(row, dtype=np.int64)
            if ids.size == 0:
                raise ShapeError(f"encode_question_batch: example {i} has no tokens")
            if ids.min() < 0 or ids.max() >= self.sizes.vocab_size:
                raise ShapeError(
                    f"encode_question_batch: token id outside vocab of {self.sizes.vocab_size}")
            np.add.at(bag[i], ids, 1.0 / ids.size)
        mean_emb = matmul(Tensor(bag), self.embed.table)
        return self.q_proj(mean_emb)

    def encode_image(self, raw_regions) -> Tensor:
        """Row-wise projection of an (n_v, d_raw) region matrix."""
        regions = raw_regions if isinstance(raw_regions, Tensor) else Tensor(raw_regions)
        if regions.data.ndim != 2 or regions.shape[0] != self.sizes.n_v:
            raise ShapeError(
                f"encode_image: expected ({self.sizes.n_v}, {self.sizes.d_raw}) regions, got {regions.shape}")
        return self.e_v(regions)

    def encode_image_batch(self, regions_batch) -> Tensor:
        """(b, n_v, d_raw) -> (b * n_v, d_v), regions of example i contiguous."""
        regions = regions_batch if isinstance(regions_batch, Tensor) else Tensor(regions_batch)
        if regions.data.ndim != 3 or regions.shape[1] != self.sizes.n_v:
            raise ShapeError(
                f"encode_image_batch: expected (b, {self.sizes.n_v}, {self.sizes.d_raw}), got {regions.shape}")
        b = regions.shape[0]
        flat = reshape(regions, (b * self.sizes.n_v, regions.shape[2]))
        return self.e_v(flat)

    # -- heads -----------------------------------------------------------

    def logits_from_encodings(self, q_repr: Tensor, v_enc: Tensor) -> Tensor:
        """Fuse encoded questions (b, d_q) with encoded regions
        (b * n_v, d_v) and classify, returning (b, answer_count) logits."""
        b = q_repr.shape[0]
        fused = self.fusion.fuse_rows(q_repr, v_enc, self.sizes.n_v)
        stacked = reshape(fused, (b, self.sizes.n_v, self.sizes.d_m))
        pooled = max_over_rows(stacked)
        return self.classifier(pooled)

    def predict_logits(self, raw_regions, tokens) -> Tensor:
        """Single-example logits, shape (answer_count,)."""
        q = self.encode_question(tokens)
        regions = self.encode_image(raw_regions)
        fused = self.fusion.fuse_rows(q.reshape((1, self.sizes.d_q)), regions, self.sizes.n_v)
        pooled = max_over_rows(fused)
        return self.classifier(pooled)

    def predict_logits_batch(self, regions_batch, token_rows) -> Tensor:
        q = self.encode_question_batch(token_rows)
        v = self.encode_image_batch(regions_batch)
        return self.logits_from_encodings(q, v)

    def predict_answer(self, raw_regions, tokens) -> int:
        """Argmax answer of the branch-free forward pass; ties go to the
        lowest index."""
        with no_grad():
            logits = self.predict_logits(raw_regions, tokens)
        return int(np.argmax(logits.data))

    def predict_answers_batch(self, regions_batch, token_rows) -> np.ndarray:
        with no_grad():
            logits = self.predict_logits_batch(regions_batch, token_rows)
        return np.argmax(logits.data, axis=1)

    def named_parameters(self, prefix: str = "model."):
        return (self.e_v.named_parameters(prefix + "e_v.")
                + self.embed.named_parameters(prefix + "embed.")
                + self.q_proj.named_parameters(prefix + "q_proj.")
                + self.fusion.named_parameters(prefix + "fusion.")
                + self.classifier.named_parameters(prefix + "classifier."))

    def encoder_parameters(self, prefix: str = "model."):
        """The shared question-encoder parameters (embedding table + q_proj)."""
        return (self.embed.named_parameters(prefix + "embed.")
                + self.q_proj.named_parameters(prefix + "q_proj."))
