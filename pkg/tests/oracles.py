"""Independent reference implementations used by the test-suite.

Nothing here calls into the package's math; these are naive loops and
finite differences kept deliberately simple.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from hagmil.tensor import GradTape, backward


def finite_difference_check(loss_fn, params, h=1e-5, max_entries=None, rng=None):
    """Max relative error between tape gradients and central differences.

    Relative error is ``|g - n| / max(|g|, |n|, 1e-7)``.  ``max_entries``
    samples at most that many coordinates per parameter.
    """
    with GradTape() as tape:
        loss = loss_fn()
    for p in params:
        p.grad = None
    backward(tape, loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            g = analytic.reshape(-1)[i]
            err = abs(g - num) / max(abs(g), abs(num), 1e-7)
            worst = max(worst, err)
    return worst


def normal_cdf(x: float) -> float:
    import mpmath

    mpmath.mp.dps = 50
    return float(mpmath.ncdf(x))


def naive_attention(q, k, v):
    """Single-head softmax attention with explicit loops."""
    n, dh = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        scores = [sum(q[i, t] * k[j, t] for t in range(dh)) / math.sqrt(dh) for j in range(n)]
        m = max(scores)
        ws = [math.exp(s - m) for s in scores]
        z = sum(ws)
        for j in range(n):
            for c in range(v.shape[1]):
                out[i, c] += ws[j] / z * v[j, c]
    return out


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p, q in itertools.product(pos, neg):
        total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def exhaustive_youden(scores, labels):
    """Try every distinct score as a ``>=`` threshold; ties in J go to the lower threshold."""
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    best_j, best_t = -2.0, None
    for t in sorted(set(scores)):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        j = tp / n_pos - fp / n_neg
        if j > best_j:
            best_j, best_t = j, t
    return best_t


def f1_at(scores, labels, t):
    tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
    fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
    fn = sum(1 for s, y in zip(scores, labels) if s < t and y == 1)
    return 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def brute_topk_children(a, k):
    """Parents by a plain selection loop (highest score, lowest id first), expanded to children."""
    remaining = list(range(len(a)))
    chosen = []
    for _ in range(min(k, len(a))):
        best = remaining[0]
        for i in remaining:
            if a[i] > a[best]:
                best = i
        chosen.append(best)
        remaining.remove(best)
    return [4 * p + c for p in chosen for c in range(4)]
