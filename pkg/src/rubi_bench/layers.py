"""Parameterized building blocks: linear maps, embeddings, MLPs, and a
low-rank bilinear fusion.

Initialization is the uniform fan-based rule: weights drawn from
Uniform(-sqrt(6/(d_in+d_out)), +sqrt(6/(d_in+d_out))), biases zero.  Every
draw comes from the generator passed to the constructor, so parameters are
fully determined by seed and construction order.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, matmul, mul, relu, repeat_rows, transpose

__all__ = ["Linear", "Embedding", "Mlp", "LowRankBilinearFusion", "seeded_rng", "parameter_census"]


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _fan_uniform(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_out, d_in))


class Linear:
    """Affine map x -> x W^T + b with weight shape (d_out, d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Tensor(_fan_uniform(rng, d_out, d_in), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim == 1:
            return add(matmul(x.reshape((1, self.d_in)), transpose(self.weight)),
                       self.bias).reshape((self.d_out,))
        return add(matmul(x, transpose(self.weight)), self.bias)

    __call__ = forward

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class Embedding:
    """Token-id to vector table of shape (vocab, d_emb)."""

    def __init__(self, vocab: int, d_emb: int, rng: np.random.Generator):
        self.vocab = vocab
        self.d_emb = d_emb
        self.table = Tensor(_fan_uniform(rng, vocab, d_emb), requires_grad=True)

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "table", self.table)]


class Mlp:
    """Stack of Linear layers with ReLU between them and none after the last."""

    def __init__(self, sizes, rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValueError(f"Mlp needs at least (d_in, d_out), got {sizes}")
        self.sizes = tuple(sizes)
        self.layers = [Linear(sizes[i], sizes[i + 1], rng) for i in range(len(sizes) - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    __call__ = forward

    def named_parameters(self, prefix: str = ""):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}layers.{i}."))
        return out


class LowRankBilinearFusion:
    """fuse(q, v) = proj_out(proj_q(q) * proj_v(v)), elementwise product in a
    shared d_h space."""

    def __init__(self, d_q: int, d_v: int, d_h: int, d_m: int, rng: np.random.Generator):
        self.proj_q = Linear(d_q, d_h, rng)
        self.proj_v = Linear(d_v, d_h, rng)
        self.proj_out = Linear(d_h, d_m, rng)

    def fuse(self, q: Tensor, v: Tensor) -> Tensor:
        """Fuse a single question vector (d_q,) with a single region (d_v,)."""
        return self.proj_out(mul(self.proj_q(q), self.proj_v(v)))

    def fuse_rows(self, q_rows: Tensor, v_rows: Tensor, regions_per_row: int = 1) -> Tensor:
        """Fuse (b, d_q) question rows against (b * regions_per_row, d_v)
        region rows; question row i covers the block of rows
        [i * regions_per_row, (i+1) * regions_per_row)."""
        hq = self.proj_q(q_rows)
        if regions_per_row > 1:
            hq = repeat_rows(hq, regions_per_row)
        return self.proj_out(mul(hq, self.proj_v(v_rows)))

    __call__ = fuse

    def named_parameters(self, prefix: str = ""):
        return (self.proj_q.named_parameters(prefix + "proj_q.")
                + self.proj_v.named_parameters(prefix + "proj_v.")
                + self.proj_out.named_parameters(prefix + "proj_out."))


def parameter_census(named_params) -> int:
    """Total parameter count, rejecting aliased or duplicated entries so a
    full-model census equals the sum of per-layer counts."""
    seen = {}
    total = 0
    for name, p in named_params:
        if name in seen and seen[name] is not p:
            raise ValueError(f"parameter name {name!r} owned by two different tensors")
        if name in seen:
            continue
        seen[name] = p
        total += p.size
    if len({id(p) for p in seen.values()}) != len(seen):
        raise ValueError("a parameter tensor appears under two names")
    return total
