"""Integrated Attention Transformer.

A stack of integrated attention modules (IAMs).  Each IAM runs
``GELU(LayerNorm(H W))``, a pre-norm residual Nystrom attention layer and
an aggregation head, and emits its hidden rows, per-instance attention
logits and a bag vector.  Bag vectors are projected to a common width,
fused with learned weights ``w_b`` and classified.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .aggregation import AggregationHead, aggregation_forward
from .nn import Module, glorot, ones, zeros
from .rng import Xoshiro256
from .tensor import ShapeError, Tensor

PAPER_DIMS = (1024, 1536, 512, 1024)


@dataclass
class IamConfig:
    d_in: int
    d_out: int
    heads: int = 8
    landmarks: int = 64
    pinv_iters: int = 6
    dropout_attn: float = 0.3
    attn_hidden: int = 384
    dropout_gate: float = 0.25
    variant: str = "gated"
    attn_out_scale: float = 1.0  # multiplies the Glorot init of the attention output projection

    def __post_init__(self):
        if self.d_out % self.heads:
            raise ValueError(f"d_out={self.d_out} is not divisible by heads={self.heads}")
        if self.landmarks < 1:
            raise ValueError("landmarks must be >= 1")
        if self.pinv_iters < 1:
            raise ValueError("pinv_iters must be >= 1")


@dataclass
class IatConfig:
    """Architecture of one per-level model.  Defaults give the 4-module bottleneck."""

    d_in: int = 1024
    dims: tuple[int, ...] = PAPER_DIMS
    d_f: int = 1024
    n_classes: int = 2
    heads: int = 8
    landmarks: int = 64
    pinv_iters: int = 6
    dropout_attn: float = 0.3
    attn_hidden: int = 384
    dropout_gate: float = 0.25
    variant: str = "gated"
    bag_source: str = "aggregation"  # or "cls_token" (ablation)
    attn_out_scale: float = 1.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if not self.dims:
            raise ValueError("at least one IAM is required")
        if self.bag_source not in ("aggregation", "cls_token"):
            raise ValueError(f"bag_source must be 'aggregation' or 'cls_token', got {self.bag_source!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    def iam_configs(self) -> list[IamConfig]:
        ins = (self.d_in,) + self.dims[:-1]
        return [
            IamConfig(i, o, self.heads, self.landmarks, self.pinv_iters, self.dropout_attn,
                      self.attn_hidden, self.dropout_gate, self.variant, self.attn_out_scale)
            for i, o in zip(ins, self.dims)
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


# ---------------------------------------------------------------- primitives


def fnn_forward(h: Tensor, w: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """``GELU(LayerNorm(H W))``; no bias on ``W``."""
    if h.shape[-1] != w.shape[0]:
        raise ShapeError(f"fnn_forward: shape mismatch {h.shape} @ {w.shape}")
    return T.gelu(T.layer_norm(h @ w, gamma, beta, eps))


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return T.transpose(T.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dh))


def _qkv(h: Tensor, p: AttentionParams):
    if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] != p.dim:
        raise ShapeError(f"attention input must be n x {p.dim} with n >= 1, got {h.shape}")
    return (_split_heads(h @ p.wq, p.heads), _split_heads(h @ p.wk, p.heads), _split_heads(h @ p.wv, p.heads))


def _softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    return T.softmax(T.mul(q @ T.transpose(k), scale), axis=-1) @ v


def exact_attention(h: Tensor, p: AttentionParams) -> Tensor:
    """Quadratic multi-head softmax attention followed by the output projection."""
    q, k, v = _qkv(h, p)
    return _merge_heads(_softmax_attention(q, k, v)) @ p.wo


def pinv_newton_schulz(a: Tensor, iters: int = 6) -> Tensor:
    """Iterative Moore-Penrose pseudo-inverse of a square (or batch of square) matrix.

    Starts from ``A^T / (||A||_1 ||A||_inf)`` and applies
    ``Z <- Z (13 I - A Z (15 I - A Z (7 I - A Z))) / 4``.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    m = a.shape[-1]
    if a.ndim < 2 or a.shape[-2] != m:
        raise ShapeError(f"pinv_newton_schulz needs square matrices, got {a.shape}")
    # a is nonnegative (softmax kernel); abs would only matter for general input
    absa = Tensor._wrap(np.sign(a.data), False) * a
    col = T.amax(T.sum(absa, axis=-2), axis=-1, keepdims=True)
    row = T.amax(T.sum(absa, axis=-1), axis=-1, keepdims=True)
    scale = T.reshape(T.reciprocal(col * row), a.shape[:-2] + (1, 1))
    z = T.transpose(a) * scale
    eye = np.eye(m)
    for _ in range(iters):
        az = a @ z
        inner = T.sub(7.0 * eye, az)
        inner = T.sub(15.0 * eye, az @ inner)
        inner = T.sub(13.0 * eye, az @ inner)
        z = T.mul(z @ inner, 0.25)
    return z


def landmark_matrix(n: int, landmarks: int) -> np.ndarray:
    """``landmarks x n`` averaging matrix of the segment means.

    The sequence is padded to a multiple of ``landmarks`` by repeating the
    last row, then split into equal consecutive segments.
    """
    group = -(-n // landmarks)
    mat = np.zeros((landmarks, n))
    for pos in range(landmarks * group):
        mat[pos // group, min(pos, n - 1)] += 1.0 / group
    return mat


def nystrom_attention(h: Tensor, p: AttentionParams, landmarks: int = 64, pinv_iters: int = 6,
                      exact_when_full: bool = True) -> Tensor:
    """Landmark (Nystrom) approximation of :func:`exact_attention`.

    With ``landmarks >= n`` the landmarks are the tokens themselves and the
    factorization ``A pinv(A) A`` equals ``A``; that case is evaluated as
    exact attention unless ``exact_when_full`` is False.
    """
    n = h.shape[0]
    if landmarks < 1:
        raise ValueError("landmarks must be >= 1")
    if landmarks >= n and exact_when_full:
        return exact_attention(h, p)
    q, k, v = _qkv(h, p)
    scale = 1.0 / math.sqrt(q.shape[-1])
    if landmarks >= n:
        q_l, k_l = q, k
    else:
        mat = Tensor._wrap(landmark_matrix(n, landmarks), False)
        q_l, k_l = mat @ q, mat @ k
    kernel_1 = T.softmax(T.mul(q @ T.transpose(k_l), scale), axis=-1)
    kernel_2 = T.softmax(T.mul(q_l @ T.transpose(k_l), scale), axis=-1)
    kernel_3 = T.softmax(T.mul(q_l @ T.transpose(k), scale), axis=-1)
    out = kernel_1 @ (pinv_newton_schulz(kernel_2, pinv_iters) @ (kernel_3 @ v))
    return _merge_heads(out) @ p.wo


# ---------------------------------------------------------------- modules


@dataclass
class AttentionOutput:
    hidden: Tensor
    logits_a: Tensor
    bag: Tensor


class Iam(Module):
    def __init__(self, cfg: IamConfig, d_f: int, rng: Xoshiro256):
        self.cfg = cfg
        d = cfg.d_out
        self.W = glorot(rng, cfg.d_in, d, "W")
        self.ln1_gamma, self.ln1_beta = ones(d), zeros(d)
        self.ln2_gamma, self.ln2_beta = ones(d), zeros(d)
        self.wq, self.wk, self.wv, self.wo = (glorot(rng, d, d, n) for n in ("wq", "wk", "wv", "wo"))
        self.wo.data *= cfg.attn_out_scale
        self.head = AggregationHead(d, cfg.attn_hidden, cfg.variant, cfg.dropout_gate, rng)
        if d == d_f:
            self.proj = Tensor(np.eye(d), requires_grad=True, name="proj")
        else:
            self.proj = glorot(rng, d, d_f, "proj")
        self._rng = rng.fork()

    @property
    def attn(self) -> AttentionParams:
        return AttentionParams(self.wq, self.wk, self.wv, self.wo, self.cfg.heads)


def iam_forward(h: Tensor, iam: Iam, skip_rows: int = 0) -> AttentionOutput:
    """One module.  ``skip_rows`` leading rows (a class token) are excluded from aggregation."""
    cfg = iam.cfg
    if h.ndim != 2 or h.shape[1] != cfg.d_in:
        raise ShapeError(f"iam_forward: input {h.shape} does not match d_in={cfg.d_in}")
    x = fnn_forward(h, iam.W, iam.ln1_gamma, iam.ln1_beta)
    normed = T.layer_norm(x, iam.ln2_gamma, iam.ln2_beta)
    ctx = nystrom_attention(normed, iam.attn, cfg.landmarks, cfg.pinv_iters)
    x = x + T.dropout(ctx, cfg.dropout_attn, iam._rng, iam.training)
    inst = x if skip_rows == 0 else T.index(x, slice(skip_rows, None))
    a, h_b = aggregation_forward(inst, iam.head)
    return AttentionOutput(x, a, h_b @ iam.proj)


@dataclass
class IatOutput:
    a: Tensor  # n x 1, last module's attention logits
    p_hat: Tensor  # C
    h_bf: Tensor  # 1 x d_f
    patch_logits: Tensor  # n x C
    bag_logits: Tensor  # C
    bags: list[Tensor] = field(default_factory=list)


class IatModel(Module):
    def __init__(self, cfg: IatConfig, seed: int = 0):
        self.cfg = cfg
        rng = Xoshiro256(seed)
        self.iams = [Iam(c, cfg.d_f, rng) for c in cfg.iam_configs()]
        m = len(self.iams)
        self.w_b = Tensor(np.full((m, 1), 1.0 / m), requires_grad=True, name="w_b")
        self.w_cls = glorot(rng, cfg.d_f, cfg.n_classes, "w_cls")
        self.b_cls = zeros(cfg.n_classes, name="b_cls")
        if cfg.bag_source == "cls_token":
            self.cls_token = Tensor(0.02 * rng.normal(cfg.d_in).reshape(1, -1), requires_grad=True, name="cls")

    @property
    def m(self) -> int:
        return len(self.iams)


def fuse_bags(bags: list[Tensor], w_b: Tensor) -> Tensor:
    """``w_b^T [h_b1; ...; h_bm]``."""
    if w_b.shape != (len(bags), 1):
        raise ShapeError(f"w_b shape {w_b.shape} does not match {len(bags)} bag vectors")
    return T.transpose(w_b) @ T.concat(bags, axis=0)


def classify(rows: Tensor, model: IatModel) -> Tensor:
    return rows @ model.w_cls + model.b_cls


def iat_forward(features: Tensor, model: IatModel) -> IatOutput:
    if features.ndim != 2 or features.shape[0] < 1:
        raise ShapeError(f"iat_forward expects a non-empty n x d bag, got {features.shape}")
    if features.shape[1] != model.cfg.d_in:
        raise ShapeError(f"iat_forward: feature dim {features.shape[1]} != d_in {model.cfg.d_in}")
    cls = model.cfg.bag_source == "cls_token"
    x = T.concat([model.cls_token, features], axis=0) if cls else features
    skip = 1 if cls else 0
    bags = []
    out = None
    for iam in model.iams:
        out = iam_forward(x, iam, skip_rows=skip)
        x = out.hidden
        bags.append(T.index(x, slice(0, 1)) @ iam.proj if cls else out.bag)
    h_bf = fuse_bags(bags, model.w_b)
    bag_logits = T.reshape(classify(h_bf, model), (model.cfg.n_classes,))
    inst = x if not cls else T.index(x, slice(1, None))
    patch_logits = classify(inst @ model.iams[-1].proj, model)
    return IatOutput(out.logits_a, T.softmax(bag_logits), h_bf, patch_logits, bag_logits, bags)
