"""Finite-difference verification of every autodiff primitive and of the
three composite loss paths the training strategies exercise.

Each primitive is checked at 10 seeded points with values in [-2, 2] and
eps = 1e-5; failures are anything above 1e-4 max relative error.  detach is
the one primitive finite differences cannot probe (perturbing the input
moves the "constant" too), so its entry asserts the defining properties
exactly: value preservation and a bitwise-zero gradient across the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .datagen import Batch
from .layers import seeded_rng
from .model import ModelSizes
from .strategy import StrategyConfig, forward_losses
from .trainer import build_model_and_branch

__all__ = ["CheckResult", "run_checks", "param_fd_check", "max_relative_error", "THRESHOLD"]

THRESHOLD = 1e-4
_EPS = 1e-5
_POINTS = 10


@dataclass
class CheckResult:
    name: str
    max_error: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28s} max_rel_err={self.max_error:.3e}"


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def param_fd_check(build_loss, named_params, eps: float = _EPS) -> float:
    """Central-difference check of a loss builder against analytic gradients
    for each listed parameter; returns the worst relative error."""
    worst = 0.0
    for _, p in named_params:
        p.zero_grad()
        T.reset_graph()
        loss = build_loss()
        T.backward(loss)
        analytic = p.grad.copy()
        numeric = np.zeros_like(analytic)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with T.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                p.mark_dirty()
                f_plus = build_loss().item()
                flat[i] = orig - eps
                p.mark_dirty()
                f_minus = build_loss().item()
                flat[i] = orig
                p.mark_dirty()
                num_flat[i] = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def _points(seed: int, shape, n: int = _POINTS):
    rng = seeded_rng(seed)
    return [rng.uniform(-2.0, 2.0, size=shape) for _ in range(n)]


def _fd_over_points(f, points) -> float:
    return max(T.finite_difference_check(f, T.Tensor(pt), _EPS) for pt in points)


# -- per-primitive checks ----------------------------------------------------


def _check_add() -> float:
    c = T.Tensor(_points(11, (3, 4), 1)[0])
    bias_in = T.Tensor(_points(12, (3, 4), 1)[0])
    err = _fd_over_points(lambda t: T.tsum(T.add(t, c)), _points(1, (3, 4)))
    err = max(err, _fd_over_points(lambda t: T.tsum(T.add(c, t)), _points(2, (3, 4))))
    err = max(err, _fd_over_points(lambda t: T.tsum(T.add(bias_in, t)), _points(3, (4,))))
    return err


def _check_mul() -> float:
    c = T.Tensor(_points(13, (3, 4), 1)[0])
    err = _fd_over_points(lambda t: T.tsum(T.mul(t, c)), _points(4, (3, 4)))
    return max(err, _fd_over_points(lambda t: T.tsum(T.mul(c, t)), _points(5, (3, 4))))


def _check_matmul() -> float:
    right = T.Tensor(_points(14, (4, 2), 1)[0])
    left = T.Tensor(_points(15, (2, 3), 1)[0])
    err = _fd_over_points(lambda t: T.tsum(T.matmul(t, right)), _points(6, (3, 4)))
    return max(err, _fd_over_points(lambda t: T.tsum(T.matmul(left, t)), _points(7, (3, 4))))


def _mixing(seed: int, shape):
    rng = seeded_rng(seed)
    return T.Tensor(rng.uniform(-1.0, 1.0, size=shape))


def _check_sigmoid() -> float:
    w = _mixing(16, (3, 4))
    return _fd_over_points(lambda t: T.tsum(T.mul(T.sigmoid(t), w)), _points(8, (3, 4)))


def _check_relu() -> float:
    w = _mixing(17, (3, 4))
    return _fd_over_points(lambda t: T.tsum(T.mul(T.relu(t), w)), _points(9, (3, 4)))


def _check_log_softmax() -> float:
    w = _mixing(18, (3, 5))
    return _fd_over_points(lambda t: T.tsum(T.mul(T.log_softmax(t), w)), _points(10, (3, 5)))


def _check_embedding_lookup() -> float:
    ids = np.array([0, 2, 2, 5])
    w = _mixing(19, (4, 3))
    return _fd_over_points(lambda t: T.tsum(T.mul(T.embedding_lookup(t, ids), w)),
                           _points(20, (6, 3)))


def _check_max_over_rows() -> float:
    w2 = _mixing(21, (3,))
    w3 = _mixing(22, (2, 3))
    err = _fd_over_points(lambda t: T.tsum(T.mul(T.max_over_rows(t), w2)), _points(23, (5, 3)))
    return max(err, _fd_over_points(lambda t: T.tsum(T.mul(T.max_over_rows(t), w3)),
                                    _points(24, (2, 4, 3))))


def _check_sum() -> float:
    return _fd_over_points(lambda t: T.tsum(t), _points(25, (3, 4)))


def _check_mean() -> float:
    return _fd_over_points(lambda t: T.tmean(t), _points(26, (3, 4)))


def _check_exp() -> float:
    w = _mixing(34, (3, 4))
    return _fd_over_points(lambda t: T.tsum(T.mul(T.exp(t), w)), _points(35, (3, 4)))


def _check_log() -> float:
    # strictly positive points, comfortably above the clamp floor
    rng = seeded_rng(36)
    points = [rng.uniform(0.2, 2.0, size=(3, 4)) for _ in range(_POINTS)]
    w = _mixing(37, (3, 4))
    return _fd_over_points(lambda t: T.tsum(T.mul(T.log(t), w)), points)


def _check_detach() -> float:
    """Exact boundary semantics instead of finite differences: values pass
    through bitwise, gradients do not pass at all."""
    for pt in _points(27, (3, 4)):
        x = T.Tensor(pt, requires_grad=True)
        x.zero_grad()
        T.reset_graph()
        d = T.detach(x)
        if d.node is not None or d.requires_grad:
            return float("inf")
        if not np.array_equal(d.data, x.data):
            return float("inf")
        # gradient of sum(x * detach(x)) w.r.t. x is exactly the detached values
        loss = T.tsum(T.mul(x, d))
        T.backward(loss)
        if not np.array_equal(x.grad, x.data):
            return float("inf")
    return 0.0


def _check_reshape() -> float:
    w = _mixing(28, (2, 6))
    return _fd_over_points(lambda t: T.tsum(T.mul(T.reshape(t, (2, 6)), w)), _points(29, (3, 4)))


def _check_transpose() -> float:
    w = _mixing(30, (4, 3))
    return _fd_over_points(lambda t: T.tsum(T.mul(T.transpose(t), w)), _points(31, (3, 4)))


def _check_repeat_rows() -> float:
    w = _mixing(32, (6, 4))
    return _fd_over_points(lambda t: T.tsum(T.mul(T.repeat_rows(t, 2), w)), _points(33, (3, 4)))


_PRIMITIVE_CHECKS = {
    "add": _check_add,
    "mul": _check_mul,
    "matmul": _check_matmul,
    "sigmoid": _check_sigmoid,
    "relu": _check_relu,
    "log_softmax": _check_log_softmax,
    "embedding_lookup": _check_embedding_lookup,
    "max_over_rows": _check_max_over_rows,
    "sum": _check_sum,
    "mean": _check_mean,
    "exp": _check_exp,
    "log": _check_log,
    "detach": _check_detach,
    "reshape": _check_reshape,
    "transpose": _check_transpose,
    "repeat_rows": _check_repeat_rows,
}


# -- composite paths ---------------------------------------------------------


def _tiny_setup(seed: int = 7):
    sizes = ModelSizes(d_raw=5, n_v=3, vocab_size=7, answer_count=4, d_emb=3,
                       d_q=4, d_h=5, d_m=4, classifier_hidden=(5,), nnq_hidden=(4,))
    model, branch = build_model_and_branch(sizes, seed)
    rng = seeded_rng(seed + 1)
    batch = Batch(regions=rng.uniform(-1.0, 1.0, size=(2, 3, 5)),
                  tokens=[np.array([0, 3, 5]), np.array([1, 2])],
                  answers=np.array([1, 3]))
    return model, branch, batch


def _check_path_classical() -> float:
    model, branch, batch = _tiny_setup()
    config = StrategyConfig(strategy="classical")

    def build():
        losses, _ = forward_losses(model, branch, batch, config)
        return losses.l_qm

    return param_fd_check(build, model.named_parameters())


def _check_path_masked() -> float:
    model, branch, batch = _tiny_setup()
    config = StrategyConfig(strategy="rubi")

    def build():
        losses, _ = forward_losses(model, branch, batch, config)
        return losses.l_qm

    return param_fd_check(build, model.named_parameters() + branch.nn_q.named_parameters("nn_q."))


def _check_path_question_only() -> float:
    # finite differences are only valid on the branch side of the detach
    model, branch, batch = _tiny_setup()
    config = StrategyConfig(strategy="rubi")

    def build():
        losses, _ = forward_losses(model, branch, batch, config)
        return losses.l_qo

    return param_fd_check(build, branch.named_parameters())


_COMPOSITE_CHECKS = {
    "path:classical_loss": _check_path_classical,
    "path:masked_loss": _check_path_masked,
    "path:question_only_loss": _check_path_question_only,
}


def run_checks() -> list:
    """Run every primitive check exactly once, then the composite paths."""
    missing = set(T.PRIMITIVES) - set(_PRIMITIVE_CHECKS)
    extra = set(_PRIMITIVE_CHECKS) - set(T.PRIMITIVES)
    if missing or extra:
        raise RuntimeError(f"primitive registry out of sync: missing={missing} extra={extra}")
    results = []
    for name in T.PRIMITIVES:
        err = _PRIMITIVE_CHECKS[name]()
        results.append(CheckResult(name=name, max_error=err, passed=err < THRESHOLD))
    for name, fn in _COMPOSITE_CHECKS.items():
        err = fn()
        results.append(CheckResult(name=name, max_error=err, passed=err < THRESHOLD))
    return results
