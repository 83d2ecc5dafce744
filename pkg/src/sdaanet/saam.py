"""Supervised affinity attention.

A support prototype is broadcast and concatenated onto support and query
features; one shared pyramid pooling extractor processes both. A 2-channel
head predicts the support mask (supervised by its ground truth) and a
1-channel head gives the query attention map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .functional import adaptive_avg_pool, bilinear_resize, conv2d, relu, sigmoid
from .params import ParamStore, init_conv
from .sdpm import GapStats, masked_gap
from .tensor import Tensor, concat

DEFAULT_BINS = (1, 2, 3, 6)


@dataclass
class SaamOutput:
    query_attention: Tensor  # (N, 1, h, w) in [0, 1]
    support_logits: list  # K tensors (N, 2, h, w)
    support_ce_loss: Tensor  # scalar


def bin_channels(dim: int, bins: Sequence[int]) -> int:
    return max(dim // len(bins), 1)


def init_saam(store: ParamStore, dim: int, rng: np.random.Generator, bins: Sequence[int] = DEFAULT_BINS) -> None:
    cin = 2 * dim
    per_bin = bin_channels(dim, bins)
    for b in bins:
        init_conv(store, f"saam.ppm.bin{b}", per_bin, cin, 1, rng)
    init_conv(store, "saam.ppm.merge", dim, cin + per_bin * len(bins), 3, rng)
    init_conv(store, "saam.head_support", 2, dim, 1, rng)
    init_conv(store, "saam.head_query", 1, dim, 1, rng)


def build_conditioned_feature(feature: Tensor, prototype: Tensor) -> Tensor:
    """Concatenate ``prototype`` (N, D), broadcast over h x w, after ``feature``."""
    n, d, h, w = feature.shape
    if prototype.shape != (n, d):
        raise ValueError(f"prototype shape {prototype.shape} does not match feature {(n, d)}")
    tiled = prototype.reshape(n, d, 1, 1).broadcast_to((n, d, h, w))
    return concat([feature, tiled], axis=1)


def pyramid_extract(x: Tensor, params: ParamStore, bins: Sequence[int] = DEFAULT_BINS, prefix: str = "saam.ppm") -> Tensor:
    """Pyramid pooling: pool -> 1x1 conv -> upsample per bin, concat, 3x3 merge + ReLU.

    Bins larger than the feature map are clamped to ``min(h, w)``.
    """
    h, w = x.shape[2:]
    branches = [x]
    for b in bins:
        size = min(b, h, w)
        pooled = adaptive_avg_pool(x, size, size)
        proj = conv2d(pooled, params[f"{prefix}.bin{b}.weight"], params[f"{prefix}.bin{b}.bias"])
        branches.append(bilinear_resize(proj, h, w, align_corners=True))
    merged = concat(branches, axis=1)
    return relu(conv2d(merged, params[f"{prefix}.merge.weight"], params[f"{prefix}.merge.bias"], padding=1))


def pixel_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target] for 2-class logits."""
    n, c, h, w = logits.shape
    if target.shape != (n, 1, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {(n, 1, h, w)}")
    labels = (target[:, 0] == 1).astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    onehot = np.stack([labels == k for k in range(c)], axis=1).astype(logits.dtype)
    count = n * h * w
    value = np.asarray(-(onehot * logp).sum() / count, dtype=logits.dtype)

    def bw(g):
        return (g * (np.exp(logp) - onehot) / count,)

    return Tensor._make(value, (logits,), bw)


def saam_forward(
    support_features: Sequence[Tensor],
    support_masks: Sequence[np.ndarray],
    query_feature: Tensor,
    params: ParamStore,
    bins: Sequence[int] = DEFAULT_BINS,
    stats: Optional[GapStats] = None,
) -> SaamOutput:
    k = len(support_features)
    if k == 0:
        raise ValueError("saam_forward needs at least one support sample")
    if len(support_masks) != k:
        raise ValueError(f"{k} support features but {len(support_masks)} masks")
    for feat, mask in zip(support_features, support_masks):
        if mask.shape[-2:] != feat.shape[-2:]:
            raise ValueError(f"support mask {mask.shape[-2:]} does not match feature {feat.shape[-2:]}")

    proto = masked_gap(support_features[0], support_masks[0], stats)
    for feat, mask in zip(support_features[1:], support_masks[1:]):
        proto = proto + masked_gap(feat, mask, stats)
    proto = proto * (1.0 / k)

    # support shots and query share one extractor pass
    n = query_feature.shape[0]
    conditioned = [build_conditioned_feature(f, proto) for f in support_features]
    conditioned.append(build_conditioned_feature(query_feature, proto))
    pyramid = pyramid_extract(concat(conditioned, axis=0), params, bins)

    support_part = pyramid[: k * n]
    query_part = pyramid[k * n :]
    all_logits = conv2d(support_part, params["saam.head_support.weight"], params["saam.head_support.bias"])
    logits = [all_logits[i * n : (i + 1) * n] for i in range(k)]
    attention = sigmoid(conv2d(query_part, params["saam.head_query.weight"], params["saam.head_query.bias"]))

    ce = pixel_cross_entropy(logits[0], support_masks[0])
    for lg, mask in zip(logits[1:], support_masks[1:]):
        ce = ce + pixel_cross_entropy(lg, mask)
    ce = ce * (1.0 / k)
    return SaamOutput(query_attention=attention, support_logits=logits, support_ce_loss=ce)
