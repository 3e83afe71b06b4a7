"""Hierarchical attention-guided MIL over a feature pyramid.

The coarsest level sees every patch.  Each finer level only sees the four
children of the ``k`` highest-attention patches chosen one level up.  Every
level has its own model and optimizer; selection is a hard, non
differentiable gather, so no gradient crosses levels.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data_io import FeaturePyramid
from .iat import IatConfig, IatModel, IatOutput, iat_forward
from .metrics import auc as auc_score
from .optim import Adam
from .pyramid import distill_features, find_topk_ids, rank_parents
from .rng import Xoshiro256
from .tensor import GradTape, NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)


@dataclass
class HagConfig:
    num_levels: int = 3
    k_per_level: tuple[int, ...] = (7, 7)  # budgets k_l .. k_1, coarsest first
    lam: float = 1.0
    lam_finer: float | None = None  # lambda below the coarsest level; None means ``lam``
    label_smoothing_low_res: float = 0.1
    label_smoothing_finest: float = 0.0
    k_loss: int = 8
    svm_tau: float = 1.0
    svm_alpha: float = 1.0
    early_stop_patience: int = 20
    max_epochs: int = 200
    lr: float = 1e-5
    weight_decay: float = 1e-5
    seed: int = 0
    model: IatConfig = field(default_factory=IatConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = IatConfig(**self.model)
        self.k_per_level = tuple(int(k) for k in self.k_per_level)
        if len(self.k_per_level) != self.num_levels - 1:
            raise ValueError(f"k_per_level needs {self.num_levels - 1} entries for {self.num_levels} levels")
        if any(k < 1 for k in self.k_per_level):
            raise ValueError("every k must be >= 1")
        if self.lam < 0 or (self.lam_finer is not None and self.lam_finer < 0):
            raise ValueError("lambda must be >= 0")
        for eps in (self.label_smoothing_low_res, self.label_smoothing_finest):
            if not 0.0 <= eps < 1.0:
                raise ValueError("label smoothing must be in [0, 1)")
        if self.k_loss < 1:
            raise ValueError("k_loss must be >= 1")

    def k_from(self, level: int) -> int:
        """Budget applied when distilling from ``level`` to ``level - 1``."""
        return self.k_per_level[self.num_levels - 1 - level]

    def lam_at(self, level: int) -> float:
        if level == self.num_levels - 1 or self.lam_finer is None:
            return self.lam
        return self.lam_finer

    def smoothing(self, level: int) -> float:
        return self.label_smoothing_finest if level == 0 else self.label_smoothing_low_res

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_per_level"] = list(self.k_per_level)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HagConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class LevelOutput:
    level: int
    attention: np.ndarray  # raw logits over this level's bag
    probs: np.ndarray
    bag_ids: np.ndarray  # patch ids at this level forming the bag (the distilled child ids)
    selected_parent_ids: np.ndarray | None  # ids one level up that produced the bag; None at the top

    @property
    def distilled_child_ids(self) -> np.ndarray:
        return self.bag_ids


@dataclass
class PatchLossBatch:
    patch_logits: Tensor  # k x C
    pseudo_labels: np.ndarray  # k copies of the bag label

    @property
    def patch_probs(self) -> np.ndarray:
        return T.softmax(self.patch_logits.detach(), axis=-1).data


def patch_batch(out: IatOutput, label: int, k_loss: int) -> PatchLossBatch:
    """Top-``k_loss`` instances by attention, each pseudo-labelled with the bag label."""
    ids = rank_parents(out.a.data[:, 0], k_loss)
    return PatchLossBatch(T.take_rows(out.patch_logits, ids), np.full(len(ids), int(label), dtype=np.int64))


def level_loss(bag_logits: Tensor, batch: PatchLossBatch, label: int, cfg: HagConfig, level: int) -> Tensor:
    """Smoothed bag cross-entropy plus lambda times the mean smooth-SVM loss of the patch batch."""
    ce = T.cross_entropy_smoothed(bag_logits, label, cfg.smoothing(level))
    lam = cfg.lam_at(level)
    if lam == 0:
        return ce
    terms = [
        T.smooth_top1_svm(T.index(batch.patch_logits, i), int(y), cfg.svm_tau, cfg.svm_alpha)
        for i, y in enumerate(batch.pseudo_labels)
    ]
    ss = T.mean(T.stack(terms))
    return ce + T.mul(ss, lam)


@dataclass
class HagResult:
    prediction: np.ndarray  # p_hat at level 0
    levels: list[LevelOutput]  # coarsest first
    losses: dict[int, float] = field(default_factory=dict)

    def level(self, j: int) -> LevelOutput:
        return next(lo for lo in self.levels if lo.level == j)


def _resolve_ks(cfg: HagConfig, k_override) -> list[int]:
    if k_override is None:
        return list(cfg.k_per_level)
    if np.isscalar(k_override):
        return [int(k_override)] * (cfg.num_levels - 1)
    ks = [int(k) for k in k_override]
    if len(ks) != cfg.num_levels - 1:
        raise ValueError(f"k_override needs {cfg.num_levels - 1} entries")
    return ks


def cascade(pyramid: FeaturePyramid, models: dict[int, IatModel], cfg: HagConfig, ks: Sequence[int],
            on_level: Callable[[int, IatOutput], None] | None = None, record: bool = False) -> HagResult:
    """Run the coarse-to-fine recursion.

    ``on_level(level, output)`` runs after each level's forward pass and
    before selection; training uses it to update that level's model.  With
    ``record`` the forward and the callback run on a fresh tape, exposed
    as ``output.tape``.
    """
    if pyramid.num_levels != cfg.num_levels:
        raise ValueError(f"pyramid has {pyramid.num_levels} levels, config expects {cfg.num_levels}")
    top = cfg.num_levels - 1
    missing = [j for j in range(cfg.num_levels) if j not in models]
    if missing:
        raise KeyError(f"missing models for levels {missing}")
    feats = pyramid.levels[top]
    bag_ids = np.arange(feats.shape[0])
    parents = None
    outputs = []
    for j in range(top, -1, -1):
        if feats.shape[0] == 0:
            raise ValueError(f"empty bag at level {j}")
        if record:
            with GradTape() as tape:
                out = iat_forward(feats, models[j])
                out.tape = tape
                if on_level is not None:
                    on_level(j, out)
        else:
            out = iat_forward(feats, models[j])
            if on_level is not None:
                on_level(j, out)
        outputs.append(LevelOutput(j, out.a.data[:, 0].copy(), out.p_hat.data.copy(), bag_ids, parents))
        if j > 0:
            local = find_topk_ids(out.a.data[:, 0], ks[top - j])
            parents = bag_ids[local[::4] // 4]
            bag_ids = (4 * parents[:, None] + np.arange(4)).reshape(-1)
            feats = distill_features(pyramid.levels[j - 1], bag_ids)
    return HagResult(outputs[-1].probs, outputs)


def hag_forward(pyramid: FeaturePyramid, models: dict[int, IatModel], cfg: HagConfig,
                k_override=None) -> HagResult:
    """Coarse-to-fine forward pass in the models' current train/eval mode."""
    return cascade(pyramid, models, cfg, _resolve_ks(cfg, k_override))


def infer(pyramid: FeaturePyramid, models: dict[int, IatModel], cfg: HagConfig, k_override=None,
          with_loss: bool = False) -> HagResult:
    """Deterministic inference (dropout off).  ``k_override`` replaces the budgets."""
    if not models:
        raise KeyError("no trained models supplied")
    for m in models.values():
        m.eval()
    losses: dict[int, float] = {}

    def on_level(j, out):
        if with_loss:
            losses[j] = level_loss(out.bag_logits, patch_batch(out, pyramid.label, cfg.k_loss),
                                   pyramid.label, cfg, j).item()

    res = cascade(pyramid, models, cfg, _resolve_ks(cfg, k_override), on_level)
    res.losses = losses
    return res


def build_models(cfg: HagConfig) -> dict[int, IatModel]:
    root = Xoshiro256(cfg.seed)
    return {j: IatModel(cfg.model, seed=int(root.spawn(1000 + j).next_u64(1)[0])) for j in range(cfg.num_levels)}


def evaluate(pyramids: Sequence[FeaturePyramid], models, cfg: HagConfig, k_override=None,
             threads: int = 1) -> list[HagResult]:
    """Inference over many slides; results keep the input order."""
    def one(p):
        return infer(p, models, cfg, k_override, with_loss=True)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, pyramids))
    return [one(p) for p in pyramids]


def positive_scores(results: Sequence[HagResult]) -> np.ndarray:
    """Binary: P(class 1); multi-class: the full probability matrix."""
    probs = np.stack([r.prediction for r in results])
    return probs[:, 1] if probs.shape[1] == 2 else probs


@dataclass
class TrainResult:
    models: dict[int, IatModel]
    log: list[dict]
    best_epoch: int
    best_val_loss: float


def train(train_set: Sequence[FeaturePyramid], val_set: Sequence[FeaturePyramid], cfg: HagConfig,
          on_epoch: Callable[[dict], None] | None = None, threads: int = 1) -> TrainResult:
    """Cascaded per-slide training with early stopping on finest-level validation loss."""
    if not train_set:
        raise ValueError("training set is empty")
    if not val_set:
        raise ValueError("validation set is empty")
    models = build_models(cfg)
    opts = {j: Adam(m.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay) for j, m in models.items()}
    shuffle_rng = Xoshiro256(cfg.seed).spawn(7)
    ks = list(cfg.k_per_level)
    best = (np.inf, -1, {j: m.state_dict() for j, m in models.items()})
    stall = 0
    history = []
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        sums = {j: 0.0 for j in models}
        for m in models.values():
            m.train()
        for idx in shuffle_rng.permutation(len(train_set)):
            slide = train_set[idx]

            def update(j, out, slide=slide):
                loss = level_loss(out.bag_logits, patch_batch(out, slide.label, cfg.k_loss), slide.label, cfg, j)
                if not np.isfinite(loss.data).all():
                    raise NonFiniteError(f"non-finite loss at level {j}, slide {slide.slide_id}, epoch {epoch}")
                opts[j].zero_grad()
                backward(out.tape, loss)
                opts[j].step()
                sums[j] += loss.item()

            cascade(slide, models, cfg, ks, update, record=True)
        results = evaluate(val_set, models, cfg, threads=threads)
        val_loss = {j: float(np.mean([r.losses[j] for r in results])) for j in models}
        labels = np.array([p.label for p in val_set])
        try:
            val_auc = auc_score(positive_scores(results), labels)
        except ValueError:
            val_auc = None
        row = {
            "epoch": epoch,
            "train_loss": {str(j): sums[j] / len(train_set) for j in sorted(models)},
            "val_loss": {str(j): val_loss[j] for j in sorted(models)},
            "val_auc": val_auc,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d val_loss[0]=%.4f val_auc=%s", epoch, val_loss[0], val_auc)
        if val_loss[0] < best[0]:
            best = (val_loss[0], epoch, {j: m.state_dict() for j, m in models.items()})
            stall = 0
        else:
            stall += 1
            if stall >= cfg.early_stop_patience:
                break
    for j, m in models.items():
        m.load_state_dict(best[2][j])
        m.eval()
    return TrainResult(models, history, best[1], float(best[0]))


def planted_recall(result: HagResult, pyramid: FeaturePyramid, level: int = 0) -> float:
    """Fraction of planted patches at ``level`` that made it into that level's bag."""
    if pyramid.planted is None:
        raise ValueError(f"{pyramid.slide_id} has no ground-truth lesion flags")
    truth = np.flatnonzero(pyramid.planted[level])
    if truth.size == 0:
        return float("nan")
    return float(np.isin(truth, result.level(level).bag_ids).mean())
