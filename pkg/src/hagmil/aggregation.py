"""Attention scoring and attention-weighted pooling of instance rows.

The head returns raw logits; pooling normalizes them with a softmax over
instances.  Top-k selection ranks raw logits, which orders instances the
same way as the softmax weights.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module, glorot
from .rng import Xoshiro256
from .tensor import ShapeError, Tensor

VARIANTS = {"gated": "gated_attention", "attention": "plain_attention", "mean": "mean", "max": "max"}

# pushes every non-selected row of the max variant to zero softmax weight
_MAX_SUPPRESS = 1e4


class AggregationHead(Module):
    def __init__(self, d1: int, d2: int = 384, variant: str = "gated", dropout_p: float = 0.25,
                 rng: Xoshiro256 | None = None):
        if variant in VARIANTS.values():
            variant = next(k for k, v in VARIANTS.items() if v == variant)
        if variant not in VARIANTS:
            raise ValueError(f"unknown aggregation variant {variant!r}; choose from {sorted(VARIANTS)}")
        self.variant = variant
        self.d1, self.d2 = d1, d2
        self.dropout_p = dropout_p
        rng = rng or Xoshiro256(0)
        self._rng = rng.fork()
        if variant in ("gated", "attention"):
            self.V = glorot(rng, d1, d2, "V")
            if variant == "gated":
                self.U = glorot(rng, d1, d2, "U")
            self.w_a = glorot(rng, d2, 1, "w_a")
        elif variant == "max":
            self.w_a = glorot(rng, d1, 1, "w_a")


def attention_scores(h: Tensor, head: AggregationHead) -> Tensor:
    """Per-instance logits, shape ``n x 1``."""
    if h.ndim != 2 or h.shape[0] < 1:
        raise ShapeError(f"attention_scores expects a non-empty n x d matrix, got {h.shape}")
    if h.shape[1] != head.d1:
        raise ShapeError(f"attention_scores: feature dim {h.shape[1]} != head input dim {head.d1}")
    v = head.variant
    if v == "mean":
        return Tensor(np.zeros((h.shape[0], 1)))
    if v == "max":
        s = h @ head.w_a
        onehot = np.zeros((h.shape[0], 1))
        onehot[int(np.argmax(s.data[:, 0]))] = 1.0
        # ranking is untouched: the arg-max row stays first, the rest shift together
        return s - Tensor((1.0 - onehot) * _MAX_SUPPRESS)
    hidden = T.tanh(h @ head.V)
    if v == "gated":
        hidden = hidden * T.sigmoid(h @ head.U)
    hidden = T.dropout(hidden, head.dropout_p, head._rng, head.training)
    return hidden @ head.w_a


def aggregate(a: Tensor, h: Tensor) -> Tensor:
    """``softmax(a)^T H``: a convex combination of the rows of ``h``."""
    n = h.shape[0]
    if a.shape not in ((n, 1), (n,)):
        raise ShapeError(f"aggregate: logits shape {a.shape} does not match {n} instances")
    w = T.softmax(T.reshape(a, (n, 1)), axis=0)
    return T.transpose(w) @ h


def aggregation_forward(h: Tensor, head: AggregationHead) -> tuple[Tensor, Tensor]:
    a = attention_scores(h, head)
    return a, aggregate(a, h)
