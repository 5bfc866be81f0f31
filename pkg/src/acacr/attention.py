"""Attention variants for feature restoration.

Three variants over a feature map F[H, W, C]:
  - vanilla: per-pixel token attention, softmax(Q K^T / sqrt(C)) V
  - ca: patch-based contextual attention, softmax(Q_p K_p^T / sqrt(d)) V_p
  - ac: attentive contextual attention; the patch similarity rows are
    mean-centered, passed through a learned per-query linear transform
    (weight, bias from small conv modules over Q) and a ReLU, which prunes
    weak long-range matches to exact zeros before attending.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "AttentionConfig", "AttentionParams", "SimilarityRecord",
    "init_attention_params", "embed_qkv", "vanilla_attention",
    "patch_similarity", "selection_params", "adjust_similarity",
    "attentive_transform", "attend_patches",
    "ca_attention_forward", "ac_attention_forward", "attention_forward",
    "export_similarity", "similarity_csv", "similarity_heatmap_png",
]

VARIANTS = ("vanilla", "ca", "ac")


@dataclass
class AttentionConfig:
    channels: int
    variant: str = "ac"
    patch_size: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.variant == "ac" and self.channels % 4:
            raise ValueError("ac variant needs channels divisible by 4 "
                             "(selection modules reduce C to C/4)")

    @property
    def selection_hidden(self) -> int:
        return self.channels // 4


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    out_kernel: Optional[Tensor] = None          # 3x3, C->C; patch variants only
    weight_k1: Optional[Tensor] = None           # 1x1, C->C/4
    weight_k2: Optional[Tensor] = None           # 1x1, C/4->1, zero-init
    bias_k1: Optional[Tensor] = None
    bias_k2: Optional[Tensor] = None

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name in ("w_q", "w_k", "w_v", "out_kernel", "weight_k1",
                     "weight_k2", "bias_k1", "bias_k2"):
            t = getattr(self, name)
            if t is not None:
                out.append((prefix + name, t))
        return out


@dataclass
class SimilarityRecord:
    query_index: int
    grid_h: int
    grid_w: int
    s_p_row: np.ndarray
    s_att_row: Optional[np.ndarray]
    top_s_p: list[tuple[int, float]] = field(default_factory=list)
    top_s_att: list[tuple[int, float]] = field(default_factory=list)


def _he_kernel(rng: T.RngStream, k: int, cin: int, cout: int, dtype) -> Tensor:
    std = math.sqrt(2.0 / (k * k * cin))
    return Tensor(rng.normal((k, k, cin, cout), std=std, dtype=dtype), requires_grad=True)


def init_attention_params(config: AttentionConfig, rng: T.RngStream,
                          dtype=np.float32) -> AttentionParams:
    """He-normal embeddings/output; selection-module final convs start at
    zero so the ac variant begins as mean-thresholded CA (W_sel = 1 via the
    constant offset, B_sel = 0)."""
    c = config.channels
    params = AttentionParams(
        w_q=_he_kernel(rng, 1, c, c, dtype),
        w_k=_he_kernel(rng, 1, c, c, dtype),
        w_v=_he_kernel(rng, 1, c, c, dtype),
    )
    if config.variant in ("ca", "ac"):
        params.out_kernel = _he_kernel(rng, 3, c, c, dtype)
    if config.variant == "ac":
        hid = config.selection_hidden
        params.weight_k1 = _he_kernel(rng, 1, c, hid, dtype)
        params.weight_k2 = Tensor(np.zeros((1, 1, hid, 1), dtype=dtype), requires_grad=True)
        params.bias_k1 = _he_kernel(rng, 1, c, hid, dtype)
        params.bias_k2 = Tensor(np.zeros((1, 1, hid, 1), dtype=dtype), requires_grad=True)
    return params


def embed_qkv(f: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Q = F*W_q, K = F*W_k, V = F*W_v via 1x1 convolutions."""
    return (T.conv2d(f, params.w_q), T.conv2d(f, params.w_k), T.conv2d(f, params.w_v))


def vanilla_attention(f: Tensor, params: AttentionParams) -> Tensor:
    """Per-pixel attention: O = softmax(Q K^T / sqrt(C)) V, reshaped H x W x C."""
    h, w, c = f.shape
    q, k, v = embed_qkv(f, params)
    n = h * w
    qm = T.reshape(q, (n, c))
    km = T.reshape(k, (n, c))
    vm = T.reshape(v, (n, c))
    s = T.softmax(T.scalar_mul(T.matmul(qm, T.transpose(km)), 1.0 / math.sqrt(c)))
    o = T.matmul(s, vm)
    return T.reshape(o, (h, w, c))


def patch_similarity(q_p: Tensor, k_p: Tensor) -> Tensor:
    """Row-stochastic patch similarity: softmax(Q_p K_p^T / sqrt(d))."""
    if q_p.shape[1] != k_p.shape[1]:
        raise ValueError(f"patch dims differ: {q_p.shape[1]} vs {k_p.shape[1]}")
    d = q_p.shape[1]
    return T.softmax(T.scalar_mul(T.matmul(q_p, T.transpose(k_p)), 1.0 / math.sqrt(d)))


def _selection_module(q: Tensor, k1: Tensor, k2: Tensor, s: int) -> Tensor:
    """conv(C->C/4) -> ReLU -> conv(C/4->1), then average-pool each s x s
    patch of the 1-channel map to one scalar per query patch."""
    m = T.conv2d(T.relu(T.conv2d(q, k1)), k2)
    return T.reduce_mean(T.patchify(m, s), axis=1)


def selection_params(q: Tensor, params: AttentionParams,
                     config: AttentionConfig) -> tuple[Tensor, Tensor]:
    """Per-query-patch selection scalars (W_sel, B_sel) of length N_p.

    W_sel carries a constant +1 offset so zero-initialized modules start the
    transform at the identity weight.
    """
    s = config.patch_size
    w_sel = T.scalar_add(_selection_module(q, params.weight_k1, params.weight_k2, s), 1.0)
    b_sel = _selection_module(q, params.bias_k1, params.bias_k2, s)
    return w_sel, b_sel


def adjust_similarity(s_p: Tensor) -> Tensor:
    """Subtract each row's mean; rows of the result sum to 0."""
    row_mean = T.reduce_mean(s_p, axis=1)
    return T.shift_rows(s_p, T.neg(row_mean))


def attentive_transform(s_p_ad: Tensor, w_sel: Tensor, b_sel: Tensor) -> Tensor:
    """S_att = ReLU(S_p_ad * W_sel + B_sel), applied along rows (per query).

    No re-normalization afterwards; the zeros produced by the ReLU are the
    pruned long-range matches.
    """
    return T.relu(T.shift_rows(T.scale_rows(s_p_ad, w_sel), b_sel))


def attend_patches(s: Tensor, v_p: Tensor) -> Tensor:
    """O_p = S V_p."""
    return T.matmul(s, v_p)


def _patch_attention_scores(f: Tensor, params: AttentionParams, config: AttentionConfig,
                            override_bias: Optional[float] = None,
                            attentive: Optional[bool] = None):
    """Shared front half of the ca/ac pipelines; returns the score matrix fed
    to the attending step plus the bits needed to finish and to export."""
    if attentive is None:
        attentive = config.variant == "ac"
    h, w, c = f.shape
    s = config.patch_size
    if h % s or w % s:
        raise ValueError(f"patch size {s} must divide feature extents {h}x{w}")
    q, k, v = embed_qkv(f, params)
    q_p = T.patchify(q, s)
    k_p = T.patchify(k, s)
    v_p = T.patchify(v, s)
    s_p = patch_similarity(q_p, k_p)
    if attentive:
        w_sel, b_sel = selection_params(q, params, config)
        if override_bias is not None:
            b_sel = Tensor(np.full(s_p.shape[0], override_bias, dtype=f.dtype))
        s_att = attentive_transform(adjust_similarity(s_p), w_sel, b_sel)
        scores = s_att
    else:
        s_att = None
        scores = s_p
    return scores, s_p, s_att, v_p


def _finish_patch_attention(scores: Tensor, v_p: Tensor, f: Tensor,
                            params: AttentionParams, config: AttentionConfig) -> Tensor:
    h, w, c = f.shape
    o_p = attend_patches(scores, v_p)
    o = T.unpatchify(o_p, h, w, c, config.patch_size)
    return T.conv2d(o, params.out_kernel)


def ca_attention_forward(f: Tensor, params: AttentionParams,
                         config: AttentionConfig) -> Tensor:
    """Contextual Attention baseline: patch similarity straight into
    attending, then a 3x3 output convolution."""
    scores, _, _, v_p = _patch_attention_scores(f, params, config, attentive=False)
    return _finish_patch_attention(scores, v_p, f, params, config)


def ac_attention_forward(f: Tensor, params: AttentionParams, config: AttentionConfig,
                         override_bias: Optional[float] = None) -> Tensor:
    """Full AC-Attention pipeline: embed, patchify, similarity, mean-center,
    learned linear transform + ReLU, attend, unpatchify, 3x3 conv.

    override_bias replaces the learned B_sel with a constant (used by the
    CA-reduction check: W_sel = 1, B_sel = 1/N_p reproduces CA exactly).
    """
    scores, _, _, v_p = _patch_attention_scores(f, params, config, override_bias,
                                                attentive=True)
    return _finish_patch_attention(scores, v_p, f, params, config)


def attention_forward(f: Tensor, params: AttentionParams,
                      config: AttentionConfig) -> Tensor:
    if config.variant == "vanilla":
        return vanilla_attention(f, params)
    if config.variant == "ca":
        return ca_attention_forward(f, params, config)
    return ac_attention_forward(f, params, config)


def _top_entries(row: np.ndarray, count: int) -> list[tuple[int, float]]:
    # descending score, ties broken by ascending patch index
    order = np.lexsort((np.arange(row.size), -row))
    return [(int(i), float(row[i])) for i in order[:count]]


def export_similarity(f: Tensor, params: AttentionParams, config: AttentionConfig,
                      query_index: int, top_fraction: float = 0.05) -> SimilarityRecord:
    """Similarity rows for one query patch plus the top-fraction patch lists."""
    if config.variant == "vanilla":
        raise ValueError("similarity export applies to patch variants only")
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError("top_fraction must be in (0, 1]")
    h, w, _ = f.shape
    s = config.patch_size
    with T.no_grad():
        _, s_p, s_att, _ = _patch_attention_scores(f, params, config)
    n_p = s_p.shape[0]
    if not 0 <= query_index < n_p:
        raise IndexError(f"query index {query_index} out of range (N_p = {n_p})")
    count = math.ceil(top_fraction * n_p)
    s_p_row = s_p.data[query_index].copy()
    record = SimilarityRecord(
        query_index=query_index,
        grid_h=h // s,
        grid_w=w // s,
        s_p_row=s_p_row,
        s_att_row=s_att.data[query_index].copy() if s_att is not None else None,
        top_s_p=_top_entries(s_p_row, count),
    )
    if record.s_att_row is not None:
        record.top_s_att = _top_entries(record.s_att_row, count)
    return record


def similarity_csv(record: SimilarityRecord) -> str:
    lines = ["patch_index,row,col,s_p,s_att"]
    for idx in range(record.s_p_row.size):
        r, c = divmod(idx, record.grid_w)
        att = record.s_att_row[idx] if record.s_att_row is not None else ""
        att_str = f"{att:.10g}" if att != "" else ""
        lines.append(f"{idx},{r},{c},{record.s_p_row[idx]:.10g},{att_str}")
    return "\n".join(lines) + "\n"


def similarity_heatmap_png(row: np.ndarray, grid_h: int, grid_w: int, path) -> None:
    """8-bit grayscale heatmap of one similarity row, scaled by the row max."""
    from PIL import Image

    grid = row.reshape(grid_h, grid_w)
    peak = float(grid.max())
    scaled = grid / peak if peak > 0 else np.zeros_like(grid)
    img = (np.clip(scaled, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
