"""Mask fusion, the three losses, and the gradient-routing contract."""

import numpy as np
import pytest

from rubi_bench import tensor as T
from rubi_bench.datagen import Batch
from rubi_bench.layers import parameter_census, seeded_rng
from rubi_bench.model import ModelSizes, VqaModel
from rubi_bench.strategy import (
    LossTriple,
    QuestionOnlyBranch,
    StrategyConfig,
    backward_and_route,
    compute_losses,
    cross_entropy,
    forward_losses,
    fuse_predictions,
    mask,
    question_only_logits,
)


@pytest.fixture(autouse=True)
def fresh_graph():
    T.reset_graph()
    yield


SIZES = ModelSizes(d_raw=5, n_v=3, vocab_size=9, answer_count=4, d_emb=3,
                   d_q=4, d_h=6, d_m=5, classifier_hidden=(6,), nnq_hidden=(4,))


def setup(seed=3):
    rng = seeded_rng(seed)
    model = VqaModel(SIZES, rng)
    branch = QuestionOnlyBranch(SIZES.d_q, SIZES.answer_count, SIZES.nnq_hidden, rng)
    data = seeded_rng(seed + 1)
    batch = Batch(regions=data.uniform(-1, 1, (4, 3, 5)),
                  tokens=[np.array([1, 2]), np.array([3]), np.array([4, 5]), np.array([7])],
                  answers=np.array([0, 2, 1, 3]))
    return model, branch, batch


def branch_for(q_dim=3, n_answers=3, seed=0):
    return QuestionOnlyBranch(q_dim, n_answers, (4,), seeded_rng(seed))


class TestMask:
    def test_zero_preactivation_sigmoid_is_half(self):
        branch = branch_for()
        for layer in branch.nn_q.layers:
            layer.weight.data = np.zeros_like(layer.weight.data)
            layer.bias.data = np.zeros_like(layer.bias.data)
        out = mask(T.Tensor(np.ones(3)), branch, "sigmoid")
        np.testing.assert_array_equal(out.data, [0.5, 0.5, 0.5])

    def test_zero_preactivation_relu_is_zero(self):
        branch = branch_for()
        for layer in branch.nn_q.layers:
            layer.weight.data = np.zeros_like(layer.weight.data)
            layer.bias.data = np.zeros_like(layer.bias.data)
        out = mask(T.Tensor(np.ones(3)), branch, "relu")
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])

    def test_known_preactivation_sigmoid_values(self):
        branch = branch_for(n_answers=2)
        for layer in branch.nn_q.layers:
            layer.weight.data = np.zeros_like(layer.weight.data)
            layer.bias.data = np.zeros_like(layer.bias.data)
        branch.nn_q.layers[-1].bias.data = np.array([2.0, -2.0])
        out = mask(T.Tensor(np.ones(3)), branch, "sigmoid")
        np.testing.assert_allclose(out.data, [0.8808, 0.1192], atol=1e-4)

    def test_unknown_activation_rejected(self):
        with pytest.raises(ValueError):
            mask(T.Tensor(np.ones(3)), branch_for(), "tanh")


class TestFusePredictions:
    def test_zero_logits_any_mask_softmax_uniform(self):
        logits = T.Tensor(np.zeros(4))
        m = T.Tensor([0.9, 0.1, 0.5, 0.7])
        fused = fuse_predictions(logits, m, "product")
        np.testing.assert_array_equal(fused.data, np.zeros(4))
        probs = np.exp(T.log_softmax(fused).data)
        np.testing.assert_allclose(probs, np.full(4, 0.25), atol=1e-12)

    def test_product_hand_arithmetic(self):
        fused = fuse_predictions(T.Tensor([2.0, 0.5]), T.Tensor([0.5, 0.5]), "product")
        np.testing.assert_array_equal(fused.data, [1.0, 0.25])

    def test_sum_combine(self):
        fused = fuse_predictions(T.Tensor([2.0, 0.5]), T.Tensor([0.5, 0.5]), "sum")
        np.testing.assert_array_equal(fused.data, [2.5, 1.0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(T.ShapeError):
            fuse_predictions(T.Tensor([1.0, 2.0]), T.Tensor([1.0, 2.0, 3.0]), "product")

    def test_mask_favoring_top_answer_raises_probability_and_lowers_loss(self):
        # the published走-through: correct-answer score 0.8 -> 0.94 drops the
        # loss from ~0.22 to ~0.06
        probs = np.array([0.8, 0.15, 0.05])
        logits = T.Tensor(np.log(probs) - np.log(probs).min())  # nonnegative
        answers = np.array([0])
        base_ce = cross_entropy(logits, answers).item()
        assert base_ce == pytest.approx(-np.log(0.8), abs=1e-3)
        m = T.Tensor([0.8, 0.2, 0.2])
        fused = fuse_predictions(logits, m, "product")
        fused_probs = np.exp(T.log_softmax(fused).data)
        assert fused_probs[0] > 0.8
        fused_ce = cross_entropy(fused, answers).item()
        assert fused_ce < base_ce


class TestCrossEntropy:
    def test_uniform_logits_ten_answers(self):
        ce = cross_entropy(T.Tensor(np.zeros((1, 10))), np.array([7]))
        assert ce.item() == pytest.approx(np.log(10), rel=1e-12)

    def test_known_probability_values(self):
        # CE at p=0.8 and p=0.5, the two published loss values
        logits = T.Tensor([np.log(0.8), np.log(0.2)])
        assert cross_entropy(logits, np.array([0])).item() == pytest.approx(0.2231, abs=1e-3)
        logits = T.Tensor([0.0, 0.0])
        assert cross_entropy(logits, np.array([0])).item() == pytest.approx(0.6931, abs=1e-3)

    def test_batch_mean(self):
        logits = T.Tensor([[np.log(0.8), np.log(0.2)], [np.log(0.5), np.log(0.5)]])
        expected = (-np.log(0.8) - np.log(0.5)) / 2
        assert cross_entropy(logits, np.array([0, 1])).item() == pytest.approx(expected, rel=1e-12)

    def test_invalid_answer_index_rejected(self):
        with pytest.raises(ValueError, match="answer index"):
            cross_entropy(T.Tensor(np.zeros((1, 4))), np.array([4]))


class TestLossModulationDirection:
    """Constructed nonnegative-logit scenarios mirroring the two training
    situations: the mask favoring the correct answer on an example the base
    model has not resolved shrinks the loss; the mask favoring a wrong
    answer on an example the base model gets right grows it."""

    def _fused_ce(self, logits, pre, answer):
        m = T.sigmoid(T.Tensor(pre))
        fused = fuse_predictions(T.Tensor(logits), m, "product")
        return cross_entropy(fused, np.array([answer])).item()

    def test_mask_toward_correct_answer_shrinks_loss(self):
        # base model leans the wrong way; the question prior rescues it
        logits = np.array([0.5, 2.0, 1.0, 0.0])
        base = cross_entropy(T.Tensor(logits), np.array([0])).item()
        for alpha in (0.5, 2.0, 5.0):
            pre = alpha * np.eye(4)[0]
            assert self._fused_ce(logits, pre, 0) < base

    def test_mask_toward_wrong_answer_grows_loss(self):
        # base model is right; the question prior pulls toward a wrong answer
        logits = np.array([2.0, 1.0, 0.5, 0.0])
        base = cross_entropy(T.Tensor(logits), np.array([0])).item()
        for alpha in (0.5, 2.0, 5.0):
            pre = alpha * np.eye(4)[1]
            assert self._fused_ce(logits, pre, 0) > base


class TestQuestionOnlyLogits:
    def test_value_identical_to_undetached_path(self):
        model, branch, batch = setup()
        q = model.encode_question_batch(batch.tokens)
        via_detach = question_only_logits(q, branch).data
        direct = branch.c_q(branch.nn_q(q)).data
        np.testing.assert_allclose(via_detach, direct, atol=1e-12)

    def test_encoder_gradient_exactly_zero(self):
        model, branch, batch = setup()
        for _, p in model.named_parameters() + branch.named_parameters():
            p.zero_grad()
        q = model.encode_question_batch(batch.tokens)
        loss = cross_entropy(question_only_logits(q, branch), batch.answers)
        T.backward(loss)
        np.testing.assert_array_equal(model.embed.table.grad,
                                      np.zeros_like(model.embed.table.data))
        np.testing.assert_array_equal(model.q_proj.weight.grad,
                                      np.zeros_like(model.q_proj.weight.data))

    def test_branch_gradients_nonzero(self):
        model, branch, batch = setup()
        for _, p in branch.named_parameters():
            p.zero_grad()
        q = model.encode_question_batch(batch.tokens)
        loss = cross_entropy(question_only_logits(q, branch), batch.answers)
        T.backward(loss)
        assert np.abs(branch.c_q.weight.grad).max() > 0
        assert np.abs(branch.nn_q.layers[0].weight.grad).max() > 0


class TestComputeLosses:
    def test_classical_triple(self):
        model, branch, batch = setup()
        triple = compute_losses(model, branch, batch, StrategyConfig(strategy="classical"))
        assert triple.l_qo.item() == 0.0
        assert triple.l_rubi.item() == triple.l_qm.item()
        assert triple.l_qm.item() > 0

    def test_rubi_additivity_to_1e12(self):
        model, branch, batch = setup()
        triple = compute_losses(model, branch, batch, StrategyConfig(strategy="rubi"))
        assert abs(triple.l_rubi.item() - triple.l_qm.item() - triple.l_qo.item()) < 1e-12
        assert triple.l_qm.item() >= 0 and triple.l_qo.item() >= 0

    def test_rubi_without_qo_loss(self):
        model, branch, batch = setup()
        cfg = StrategyConfig(strategy="rubi", use_qo_loss=False)
        triple = compute_losses(model, branch, batch, cfg)
        assert triple.l_qo.item() == 0.0
        assert triple.l_rubi.item() == pytest.approx(triple.l_qm.item(), rel=1e-15)

    def test_question_only_triple(self):
        model, branch, batch = setup()
        triple = compute_losses(model, branch, batch, StrategyConfig(strategy="question_only"))
        assert triple.l_qm.item() == 0.0
        assert triple.l_rubi.item() == triple.l_qo.item() > 0

    def test_invalid_answer_rejected(self):
        model, branch, batch = setup()
        batch.answers[0] = 99
        with pytest.raises(ValueError):
            compute_losses(model, branch, batch, StrategyConfig(strategy="rubi"))


def grads_of(params):
    return {name: (None if p.grad is None else p.grad.copy()) for name, p in params}


def run_routed(strategy_config, *, skip=None, seed=3):
    """One zero-grad + forward + routed backward; optionally suppress one
    loss term by replacing it with a detached zero."""
    model, branch, batch = setup(seed)
    params = model.named_parameters() + branch.named_parameters()
    for _, p in params:
        p.zero_grad()
    triple = compute_losses(model, branch, batch, strategy_config)
    if skip == "l_qm":
        triple = LossTriple(l_qm=T.Tensor(0.0), l_qo=triple.l_qo, l_rubi=triple.l_rubi)
    if skip == "l_qo":
        triple = LossTriple(l_qm=triple.l_qm, l_qo=T.Tensor(0.0), l_rubi=triple.l_rubi)
    backward_and_route(triple, strategy_config)
    return model, branch, grads_of(params)


class TestBackwardAndRoute:
    def test_cq_gradient_comes_only_from_l_qo(self):
        cfg = StrategyConfig(strategy="rubi")
        _, _, full = run_routed(cfg)
        _, _, qo_only = run_routed(cfg, skip="l_qm")
        for name in full:
            if ".c_q." in name:
                np.testing.assert_array_equal(full[name], qo_only[name])
                assert np.abs(full[name]).max() > 0

    def test_eq_gradient_comes_only_from_l_qm(self):
        cfg = StrategyConfig(strategy="rubi")
        _, _, full = run_routed(cfg)
        _, _, qm_only = run_routed(cfg, skip="l_qo")
        for name in full:
            if ".embed." in name or ".q_proj." in name:
                np.testing.assert_array_equal(full[name], qm_only[name])

    def test_cq_gradient_zero_without_qo_loss(self):
        cfg = StrategyConfig(strategy="rubi", use_qo_loss=False)
        _, branch, grads = run_routed(cfg)
        for name, g in grads.items():
            if ".c_q." in name:
                np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_nnq_accumulates_from_both_losses(self):
        cfg = StrategyConfig(strategy="rubi")
        _, _, full = run_routed(cfg)
        _, _, qm_only = run_routed(cfg, skip="l_qo")
        _, _, qo_only = run_routed(cfg, skip="l_qm")
        name = "branch.nn_q.layers.0.weight"
        assert np.abs(qm_only[name]).max() > 0
        assert np.abs(qo_only[name]).max() > 0
        np.testing.assert_allclose(full[name], qm_only[name] + qo_only[name], atol=1e-12)

    def test_classical_leaves_branch_untouched(self):
        cfg = StrategyConfig(strategy="classical")
        _, _, grads = run_routed(cfg)
        for name, g in grads.items():
            if name.startswith("branch."):
                np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_question_only_reaches_encoder_but_not_visual_tower(self):
        cfg = StrategyConfig(strategy="question_only")
        _, _, grads = run_routed(cfg)
        assert np.abs(grads["model.embed.table"]).max() > 0
        assert np.abs(grads["branch.c_q.weight"]).max() > 0
        np.testing.assert_array_equal(grads["model.e_v.weight"],
                                      np.zeros_like(grads["model.e_v.weight"]))
        np.testing.assert_array_equal(grads["model.classifier.layers.0.weight"],
                                      np.zeros_like(grads["model.classifier.layers.0.weight"]))


class TestSharedEncoder:
    def test_mask_path_reads_the_same_encoder_storage(self):
        model, branch, batch = setup()
        q = model.encode_question_batch(batch.tokens)
        reads_before = model.embed.table.reads
        mask(q, branch, "sigmoid")  # mask path consumes the shared q_repr
        assert model.embed.table.reads == reads_before  # no second encoder pass

    def test_census_counts_encoder_once(self):
        model, branch, _ = setup()
        total = parameter_census(model.named_parameters() + branch.named_parameters())
        expected = sum(p.size for _, p in model.named_parameters())
        expected += sum(p.size for _, p in branch.named_parameters())
        assert total == expected
