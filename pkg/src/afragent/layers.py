"""Shared model plumbing: linear, layer-norm, feed-forward, multi-head attention.

The vision encoder, the query/text fusion transformer, and the action decoder
are all assembled from these pieces, so every dense matmul in the system flows
through exactly one code path and the cost model only has to mirror this file
plus the call sites.

Parameter naming: each layer reports a flat dict of local names; owners prefix
them with dots ("blocks.0.attn.wq.w"), giving every tensor in a model a unique
stable path, which the checkpoint format relies on.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .numerics import Tensor


def prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Linear:
    """y = x @ w + b over row vectors; w is (d_in, d_out)."""

    def __init__(
        self,
        rng: np.random.Generator,
        d_in: int,
        d_out: int,
        zero_init: bool = False,
        bias_fill: float = 0.0,
        bias: bool = True,
    ):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = nm.uniform_init(rng, (d_in, d_out), fan_in=d_in)
        self.w = nm.tensor(w, requires_grad=True)
        self.b = nm.tensor(np.full(d_out, float(bias_fill)), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nm.matmul(x, self.w)
        return nm.add(y, self.b) if self.b is not None else y

    def params(self) -> dict[str, Tensor]:
        if self.b is None:
            return {"w": self.w}
        return {"w": self.w, "b": self.b}


class LayerNorm:
    def __init__(self, d: int):
        self.gain = nm.tensor(np.ones(d), requires_grad=True)
        self.bias = nm.tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.gain, self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class FeedForward:
    """Two linears with gelu between; optionally a zeroed output layer.

    A zeroed output layer makes the whole module emit out_bias_fill at
    initialization regardless of input, which is how fusion blocks start as
    identities.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        d_in: int,
        d_hidden: int,
        d_out: int,
        zero_init_out: bool = False,
        out_bias_fill: float = 0.0,
    ):
        self.lin1 = Linear(rng, d_in, d_hidden)
        self.lin2 = Linear(rng, d_hidden, d_out, zero_init=zero_init_out, bias_fill=out_bias_fill)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(nm.gelu(self.lin1(x)))

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("lin1", self.lin1.params()), **prefixed("lin2", self.lin2.params())}


class MultiHeadAttention:
    """Scaled dot-product attention with per-head column slices.

    Query input is d_model wide; key/value input may have a different width
    d_kv_in (the image-token case), projected to d_model inside this layer.
    `mask` is an additive (Tq, Tk) float array, 0 where attention is allowed
    and a large negative number where blocked.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, heads: int, d_kv_in: int | None = None):
        if d_model % heads != 0:
            raise nm.ShapeError(f"d_model {d_model} not divisible by heads {heads}")
        d_kv_in = d_model if d_kv_in is None else d_kv_in
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(rng, d_model, d_model)
        # no key bias: softmax is invariant to a per-query constant shift, so a
        # key bias is provably inert and would only carry a dead parameter
        self.wk = Linear(rng, d_kv_in, d_model, bias=False)
        self.wv = Linear(rng, d_kv_in, d_model)
        self.wo = Linear(rng, d_model, d_model)

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q = self.wq(q_in)
        k = self.wk(kv_in)
        v = self.wv(kv_in)
        if mask is not None:
            if mask.shape != (q.shape[0], k.shape[0]):
                raise nm.ShapeError(
                    f"attention mask shape {mask.shape} does not match ({q.shape[0]}, {k.shape[0]})"
                )
            mask_t = nm.tensor(mask)
        scale = 1.0 / math.sqrt(self.d_head)
        outs = []
        for h in range(self.heads):
            lo = h * self.d_head
            qh = nm.narrow(q, 1, lo, self.d_head)
            kh = nm.narrow(k, 1, lo, self.d_head)
            vh = nm.narrow(v, 1, lo, self.d_head)
            scores = nm.mul(nm.matmul(qh, nm.transpose(kh)), scale)
            if mask is not None:
                scores = nm.add(scores, mask_t)
            attn = nm.softmax(scores, axis=-1)
            outs.append(nm.matmul(attn, vh))
        return self.wo(nm.concat(outs, axis=1))

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(prefixed(name, lin.params()))
        return out


class TransformerBlock:
    """Pre-norm residual block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, rng: np.random.Generator, d_model: int, heads: int, d_ffn: int):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(rng, d_model, heads)
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(rng, d_model, d_ffn, d_model)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        a = self.ln1(x)
        x = nm.add(x, self.attn(a, a, mask))
        f = self.ln2(x)
        return nm.add(x, self.ffn(f))

    def params(self) -> dict[str, Tensor]:
        return {
            **prefixed("ln1", self.ln1.params()),
            **prefixed("attn", self.attn.params()),
            **prefixed("ln2", self.ln2.params()),
            **prefixed("ffn", self.ffn.params()),
        }


def causal_mask(n: int) -> np.ndarray:
    """Additive lower-triangular mask: position i may attend to j <= i."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -1e9
    return m
