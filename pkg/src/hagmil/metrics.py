"""Slide-level evaluation metrics: ROC AUC, Youden threshold, F1, accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied pos/neg pairs count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    r = _average_ranks(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels) -> float:
    """Binary AUC for 1-D scores, macro one-vs-rest for an ``n x C`` score matrix."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.ndim == 1:
        return binary_auc(s, y)
    present = np.unique(y)
    if len(present) < 2:
        raise ValueError("AUC needs samples from at least two classes")
    return float(np.mean([binary_auc(s[:, c], y == c) for c in range(s.shape[1]) if c in present]))


def youden_threshold(scores, labels) -> float:
    """Score threshold maximizing TPR - FPR for the rule ``score >= t``.

    Candidates are the distinct scores; ties in J go to the lower threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("Youden threshold needs both classes")
    order = np.argsort(-s, kind="mergesort")
    ss, ys = s[order], y[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    last = np.r_[ss[1:] != ss[:-1], True]  # end of each group of equal scores
    thresholds = ss[last]
    j = tp[last] / n_pos - fp[last] / n_neg
    best = j.max()
    return float(thresholds[j == best].min())


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


@dataclass
class EvalReport:
    auc: float
    f1: float
    accuracy: float
    threshold: float | None
    n: int
    per_class: list[dict] = field(default_factory=list)
    config_digest: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def classify_metrics(scores, labels, threshold_mode: str = "fixed", threshold: float = 0.5) -> EvalReport:
    """AUC plus F1/accuracy at a fixed or Youden threshold (binary) or at argmax (multi-class)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if threshold_mode not in ("fixed", "youden"):
        raise ValueError(f"threshold_mode must be 'fixed' or 'youden', got {threshold_mode!r}")
    area = auc(s, y)
    if s.ndim == 1:
        t = youden_threshold(s, y) if threshold_mode == "youden" else float(threshold)
        pred = s >= t
        truth = y == 1
        tp = int((pred & truth).sum())
        fp = int((pred & ~truth).sum())
        fn = int((~pred & truth).sum())
        return EvalReport(area, _f1(tp, fp, fn), float((pred == truth).mean()), t, len(y))
    pred = s.argmax(axis=1)
    per_class = []
    f1s = []
    for c in range(s.shape[1]):
        tp = int(((pred == c) & (y == c)).sum())
        fp = int(((pred == c) & (y != c)).sum())
        fn = int(((pred != c) & (y == c)).sum())
        f = _f1(tp, fp, fn)
        f1s.append(f)
        try:
            c_auc = binary_auc(s[:, c], y == c)
        except ValueError:
            c_auc = None
        per_class.append({"class": c, "auc": c_auc, "f1": f, "support": int((y == c).sum())})
    return EvalReport(area, float(np.mean(f1s)), float((pred == y).mean()), None, len(y), per_class)
