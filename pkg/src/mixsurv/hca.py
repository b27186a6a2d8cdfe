"""Hierarchical context attention over clustered patches.

Intra-cluster self-attention refines each group with shared weights, group
means go through a second self-attention layer, and the mean of the refined
summaries is broadcast back onto every selected patch.  Remaining patches are
appended untouched and the whole bag is reduced by gated attention pooling.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class MhsaLayer:
    """Post-norm residual multi-head self-attention (no positional encoding)."""

    def __init__(self, d: int, heads: int = 8, dropout: float = 0.1,
                 rng: np.random.Generator | None = None, name: str = "mhsa"):
        if d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.heads, self.dropout = d, heads, dropout
        self.wq = T.uniform_init(rng, (d, d), d, name=f"{name}.wq")
        self.wk = T.uniform_init(rng, (d, d), d, name=f"{name}.wk")
        self.wv = T.uniform_init(rng, (d, d), d, name=f"{name}.wv")
        self.wo = T.uniform_init(rng, (d, d), d, name=f"{name}.wo")
        self.bq = T.zeros_param((d,), name=f"{name}.bq")
        self.bk = T.zeros_param((d,), name=f"{name}.bk")
        self.bv = T.zeros_param((d,), name=f"{name}.bv")
        self.bo = T.zeros_param((d,), name=f"{name}.bo")
        self.gain = T.parameter(np.ones(d), name=f"{name}.ln_gain")
        self.bias = T.zeros_param((d,), name=f"{name}.ln_bias")

    def named_parameters(self):
        ps = (self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.gain, self.bias)
        return [(p.name, p) for p in ps]


def mhsa(layer: MhsaLayer, x, rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """LayerNorm(x + MHSA(x)) for one set of tokens ``x`` (s x d)."""
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.d:
        raise T.ShapeError(f"attention layer expects width {layer.d}, got {x.shape}")
    s, h = x.shape[0], layer.heads
    dh = layer.d // h

    def split(t: Tensor) -> Tensor:
        return t.reshape(s, h, dh).transpose(1, 0, 2)

    q = split(x @ layer.wq + layer.bq)
    k = split(x @ layer.wk + layer.bk)
    v = split(x @ layer.wv + layer.bv)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
    attn = T.dropout(T.softmax(scores, axis=-1), layer.dropout, rng, training)
    ctx = (attn @ v).transpose(1, 0, 2).reshape(s, layer.d)
    out = ctx @ layer.wo + layer.bo
    return T.layer_norm(x + out, layer.gain, layer.bias)


def intra_cluster_attend(layer: MhsaLayer, clusters: Sequence, rng=None, training: bool = False) -> list[Tensor]:
    out = []
    for i, c in enumerate(clusters):
        c = T.as_tensor(c)
        if c.shape[0] == 0:
            raise ValueError(f"cluster {i} is empty")
        out.append(mhsa(layer, c, rng, training))
    return out


def summarize_clusters(refined: Sequence[Tensor]) -> Tensor:
    return T.concat([T.as_tensor(c).mean(axis=0, keepdims=True) for c in refined], axis=0)


def inter_cluster_attend(layer: MhsaLayer, summaries, rng=None, training: bool = False) -> Tensor:
    return mhsa(layer, summaries, rng, training)


def broadcast_residual(p_tilde, r_prime) -> Tensor:
    """Add the column-mean of the refined summaries to every row."""
    r_bar = T.as_tensor(r_prime).mean(axis=0, keepdims=True)
    return T.as_tensor(p_tilde) + r_bar


def assemble_final(p_hat, p_rem) -> Tensor:
    p_hat = T.as_tensor(p_hat)
    if p_rem is None or np.shape(p_rem.data if isinstance(p_rem, Tensor) else p_rem)[0] == 0:
        return p_hat
    p_rem = T.as_tensor(p_rem)
    if p_rem.shape[1] != p_hat.shape[1]:
        raise T.ShapeError(f"width mismatch: processed {p_hat.shape} vs remaining {p_rem.shape}")
    return T.concat([p_hat, p_rem], axis=0)


class AttentionPool:
    """Bias-free gated attention pooling: softmax over w_a . tanh(W_h x_i)."""

    def __init__(self, d: int, hidden: int = 256, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.hidden = d, hidden
        self.w_h = T.uniform_init(rng, (d, hidden), d, name="pool.w_h")
        self.w_a = T.uniform_init(rng, (hidden, 1), hidden, name="pool.w_a")

    def named_parameters(self):
        return [(self.w_h.name, self.w_h), (self.w_a.name, self.w_a)]


def attention_weights(pool: AttentionPool, p_final) -> Tensor:
    scores = T.tanh(T.as_tensor(p_final) @ pool.w_h) @ pool.w_a
    return T.softmax(scores.reshape(-1), axis=0)


def attention_pool(pool: AttentionPool, p_final) -> Tensor:
    p_final = T.as_tensor(p_final)
    if p_final.ndim != 2 or p_final.shape[0] < 1:
        raise ValueError(f"need a non-empty n x d matrix, got {p_final.shape}")
    alpha = attention_weights(pool, p_final)
    return (alpha.reshape(1, -1) @ p_final).reshape(-1)
