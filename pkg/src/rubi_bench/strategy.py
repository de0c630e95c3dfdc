"""Training strategies: the classical cross-entropy baseline, the masked-loss
(rubi) strategy with its question-only branch, and the standalone
question-only baseline.

The rubi strategy combines the base model's softmax scores, elementwise,
with an activation of the branch network's output and renormalizes inside
the cross-entropy (score 0.8 -> 0.94, loss 0.22 -> 0.06 on a biased example;
0.69 -> 1.20 on a counter-bias one).  Fusing scores rather than raw logits
keeps the mask additive in logit space, so biased examples lose loss mass
while the base model keeps full-strength gradients; a multiplicative mask on
raw logits scales those gradients by the mask value and starves the base
model at high mask contrast.  Gradient routing is the load-bearing part: the
masked loss trains the base model, the shared question encoder, and the
branch network nn_q, but never the branch classifier c_q; the question-only
loss trains nn_q and c_q only, stopped at the encoder boundary by a detach.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Linear, Mlp
from .model import VqaModel
from .tensor import (
    Tensor,
    ShapeError,
    add,
    backward,
    detach,
    exp,
    log,
    log_softmax,
    mul,
    relu,
    sigmoid,
    tsum,
)

__all__ = [
    "StrategyConfig",
    "QuestionOnlyBranch",
    "LossTriple",
    "mask",
    "fuse_predictions",
    "question_only_logits",
    "cross_entropy",
    "compute_losses",
    "backward_and_route",
]

STRATEGIES = ("classical", "rubi", "question_only")
MASK_ACTIVATIONS = ("sigmoid", "relu")
COMBINES = ("product", "sum")


@dataclass
class StrategyConfig:
    strategy: str = "rubi"
    mask_activation: str = "sigmoid"
    combine: str = "product"
    use_qo_loss: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mask_activation not in MASK_ACTIVATIONS:
            raise ValueError(
                f"mask_activation must be one of {MASK_ACTIVATIONS}, got {self.mask_activation!r}")
        if self.combine not in COMBINES:
            raise ValueError(f"combine must be one of {COMBINES}, got {self.combine!r}")

    def label(self) -> str:
        """Short human-readable cell name for tables."""
        if self.strategy != "rubi":
            return self.strategy
        parts = ["rubi"]
        if self.mask_activation != "sigmoid":
            parts.append(self.mask_activation)
        if self.combine != "product":
            parts.append(self.combine)
        if not self.use_qo_loss:
            parts.append("no_qo")
        return "_".join(parts)


class QuestionOnlyBranch:
    """nn_q maps the question representation to answer-space scores; c_q is
    a square answer-space classifier fed by nn_q's output."""

    def __init__(self, d_q: int, answer_count: int, nnq_hidden, rng: np.random.Generator):
        self.nn_q = Mlp((d_q, *nnq_hidden, answer_count), rng)
        self.c_q = Linear(answer_count, answer_count, rng)

    def named_parameters(self, prefix: str = "branch."):
        return (self.nn_q.named_parameters(prefix + "nn_q.")
                + self.c_q.named_parameters(prefix + "c_q."))


def mask(q_repr: Tensor, branch: QuestionOnlyBranch, activation: str) -> Tensor:
    """Answer-space mask computed from the question representation; sigmoid
    keeps coordinates in (0, 1), relu in [0, inf)."""
    if activation not in MASK_ACTIVATIONS:
        raise ValueError(f"unknown mask activation {activation!r}")
    pre = branch.nn_q(q_repr)
    return sigmoid(pre) if activation == "sigmoid" else relu(pre)


def fuse_predictions(logits: Tensor, mask_values: Tensor, combine: str) -> Tensor:
    if combine not in COMBINES:
        raise ValueError(f"unknown combine {combine!r}")
    if logits.shape != mask_values.shape:
        raise ShapeError(
            f"fuse_predictions: logits {logits.shape} vs mask {mask_values.shape}")
    return mul(logits, mask_values) if combine == "product" else add(logits, mask_values)


def question_only_logits(q_repr: Tensor, branch: QuestionOnlyBranch) -> Tensor:
    """Branch predictions on a detached copy of the question representation:
    identical values to c_q(nn_q(q_repr)), but no gradient crosses into the
    encoder."""
    return branch.c_q(branch.nn_q(detach(q_repr)))


def cross_entropy(logits: Tensor, answers) -> Tensor:
    """Mean over the batch of -log softmax(logits)[answer]."""
    answers = np.asarray(answers, dtype=np.int64)
    if logits.data.ndim == 1:
        logits = logits.reshape((1, logits.shape[0]))
    b, n_answers = logits.shape
    if answers.shape != (b,):
        raise ShapeError(f"cross_entropy: {b} logit rows vs answers shape {answers.shape}")
    if answers.min() < 0 or answers.max() >= n_answers:
        raise ValueError(
            f"cross_entropy: answer index outside [0, {n_answers}): {answers.min()}..{answers.max()}")
    onehot = np.zeros((b, n_answers))
    onehot[np.arange(b), answers] = 1.0
    picked = tsum(mul(log_softmax(logits), Tensor(onehot)))
    return mul(picked, Tensor(-1.0 / b))


@dataclass
class LossTriple:
    l_qm: Tensor
    l_qo: Tensor
    l_rubi: Tensor


def _zero_loss() -> Tensor:
    return Tensor(0.0)


def forward_losses(model: VqaModel, branch: QuestionOnlyBranch, batch,
                   config: StrategyConfig):
    """Compute the loss triple plus the logits a progress log should score.

    ``batch`` carries ``regions`` (b, n_v, d_raw), ``tokens`` (list of id
    arrays) and ``answers`` (b,).  Returns (LossTriple, scored_logits) where
    scored_logits is the branch-free base output, or the question-only
    model's output under the question_only strategy.
    """
    answers = np.asarray(batch.answers, dtype=np.int64)

    if config.strategy == "question_only":
        q_repr = model.encode_question_batch(batch.tokens)
        qo = branch.c_q(branch.nn_q(q_repr))  # end-to-end: encoder included
        l_qo = cross_entropy(qo, answers)
        return LossTriple(l_qm=_zero_loss(), l_qo=l_qo, l_rubi=l_qo), qo

    q_repr = model.encode_question_batch(batch.tokens)
    v_enc = model.encode_image_batch(batch.regions)
    base_logits = model.logits_from_encodings(q_repr, v_enc)

    if config.strategy == "classical":
        l_qm = cross_entropy(base_logits, answers)
        return LossTriple(l_qm=l_qm, l_qo=_zero_loss(), l_rubi=l_qm), base_logits

    scores = exp(log_softmax(base_logits))
    fused = fuse_predictions(scores, mask(q_repr, branch, config.mask_activation),
                             config.combine)
    # log turns the fused scores back into logits; cross_entropy renormalizes
    l_qm = cross_entropy(log(fused), answers)
    if config.use_qo_loss:
        l_qo = cross_entropy(question_only_logits(q_repr, branch), answers)
    else:
        l_qo = _zero_loss()
    return LossTriple(l_qm=l_qm, l_qo=l_qo, l_rubi=add(l_qm, l_qo)), base_logits


def compute_losses(model: VqaModel, branch: QuestionOnlyBranch, batch,
                   config: StrategyConfig) -> LossTriple:
    losses, _ = forward_losses(model, branch, batch, config)
    return losses


def backward_and_route(losses: LossTriple, config: StrategyConfig) -> dict:
    """One backward sweep per loss term.

    Routing falls out of graph structure: the masked loss never reaches c_q
    because the mask path does not use it, and the question-only loss never
    reaches the encoder because of the detach boundary.  Gradients from the
    two sweeps accumulate additively, which is exactly the gradient of the
    summed objective.
    """
    state = {"qm": None, "qo": None}
    if losses.l_qm.node is not None:
        state["qm"] = backward(losses.l_qm)
    if losses.l_qo.node is not None:
        state["qo"] = backward(losses.l_qo)
    return state


def predict_logits_for_strategy(model: VqaModel, branch: QuestionOnlyBranch,
                                regions, token_rows, config: StrategyConfig) -> np.ndarray:
    """Evaluation-time logits: the branch-free base model, except under the
    question_only strategy where the unimodal model is the model."""
    from .tensor import no_grad

    with no_grad():
        if config.strategy == "question_only":
            q_repr = model.encode_question_batch(token_rows)
            return branch.c_q(branch.nn_q(q_repr)).data
        return model.predict_logits_batch(regions, token_rows).data
