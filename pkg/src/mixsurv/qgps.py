"""Quantile-gated patch selection.

A small perceptron scores every patch; the bag is split into the top
``ceil((1 - q) * n)`` patches (kept for clustering and attention) and the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T
from .tensor import Tensor


class PatchScorer:
    """d -> h -> 1 perceptron with a tanh hidden layer."""

    def __init__(self, d: int, hidden: int = 128, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d = d
        self.hidden = hidden
        self.w1 = T.uniform_init(rng, (d, hidden), d, name="scorer.w1")
        self.b1 = T.zeros_param((hidden,), name="scorer.b1")
        self.w2 = T.uniform_init(rng, (hidden, 1), hidden, name="scorer.w2")
        self.b2 = T.zeros_param((1,), name="scorer.b2")

    def named_parameters(self):
        return [(p.name, p) for p in (self.w1, self.b1, self.w2, self.b2)]


def score_patches(scorer: PatchScorer, features) -> Tensor:
    x = T.as_tensor(features)
    if x.ndim != 2 or x.shape[1] != scorer.d:
        raise T.ShapeError(f"scorer expects width {scorer.d}, got features of shape {x.shape}")
    h = T.tanh(x @ scorer.w1 + scorer.b1)
    return (h @ scorer.w2 + scorer.b2).reshape(-1)


def quantile_threshold(logits, q: float) -> float:
    """Empirical q-quantile, linear interpolation between order statistics."""
    if not 0.0 <= q < 1.0:
        raise ValueError(f"quantile q must lie in [0, 1), got {q}")
    arr = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64).reshape(-1)
    if arr.size < 1:
        raise ValueError("need at least one logit")
    return float(np.quantile(arr, q, method="linear"))


def n_selected(n: int, q: float) -> int:
    # exact rational arithmetic: (1 - 0.7) * 10 is 3.0000000000000004 in floats
    return math.ceil((1 - Fraction(str(q))) * n)


@dataclass(frozen=True)
class GateResult:
    selected: np.ndarray
    remaining: np.ndarray
    threshold: float


def select_patches(logits, q: float) -> GateResult:
    arr = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64).reshape(-1)
    tau = quantile_threshold(arr, q)
    n = arr.size
    m = n_selected(n, q)
    if m < 1:
        raise ValueError(f"q={q} selects no patches from a bag of {n}")
    # stable sort on -logit keeps lower index first among ties
    order = np.argsort(-arr, kind="stable")
    selected = np.sort(order[:m])
    remaining = np.sort(order[m:])
    return GateResult(selected, remaining, tau)
