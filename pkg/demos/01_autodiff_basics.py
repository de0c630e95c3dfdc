"""Tour of the tensor engine: forward ops, reverse-mode gradients, and the
finite-difference harness that keeps them honest."""

import numpy as np

from rubi_bench import tensor as T

# values and gradients for a tiny expression: loss = mean((x W) * s)
x = T.Tensor([[1.0, -2.0], [0.5, 3.0]], requires_grad=True)
w = T.Tensor([[0.2, -0.1], [0.4, 0.3]], requires_grad=True)
x.zero_grad()
w.zero_grad()

hidden = T.sigmoid(T.matmul(x, w))
loss = T.tmean(hidden)
print("loss:", loss.item())

T.backward(loss)
print("d loss / d x:\n", x.grad)
print("d loss / d w:\n", w.grad)

# detach cuts the graph: the same values flow, no gradient does
T.reset_graph()
x.zero_grad()
frozen = T.detach(T.matmul(x, w))
loss2 = T.tsum(T.mul(frozen, frozen))
print("\ndetached loss:", loss2.item(), "- graph-attached?", loss2.node is not None)

# every primitive is validated against central differences
point = T.Tensor(np.linspace(-1.5, 1.5, 6).reshape(2, 3))
err = T.finite_difference_check(lambda t: T.tsum(T.mul(T.log_softmax(t), t)), point)
print("\nfinite-difference max relative error:", f"{err:.2e}")

# the stable log-softmax stays finite even for extreme inputs
extreme = T.log_softmax(T.Tensor([1e4, 0.0, -1e4]))
print("log-softmax of [1e4, 0, -1e4]:", extreme.data)
