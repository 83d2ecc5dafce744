"""Self-distillation guided prototypes.

Support prototypes come from masked average pooling, drive a support-guided
squeeze-and-excitation (SSE) channel reweighting of both support and query
features, and are pulled toward a query-informed teacher distribution by a
KL self-distillation loss. Two K-shot variants differ in how teachers are
built: one shared teacher (integral) or one per support sample (separate).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .functional import fully_connected, relu, sigmoid
from .params import ParamStore, init_fc
from .tensor import Tensor


class KShotStrategy(str, enum.Enum):
    INTEGRAL = "integral"
    SEPARATE = "separate"

    @classmethod
    def parse(cls, value) -> "KShotStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown K-shot strategy {value!r}; expected 'integral' or 'separate'") from None


@dataclass
class GapStats:
    """Counts masked-GAP calls that fell back to an unmasked mean."""

    fallbacks: int = 0


def masked_gap(feature: Tensor, mask: np.ndarray, stats: Optional[GapStats] = None) -> Tensor:
    """Per-channel mean of ``feature`` (N, D, h, w) over positions where ``mask`` == 1.

    Rows whose mask is empty use the plain spatial mean instead and are
    counted in ``stats``.
    """
    n, d, h, w = feature.shape
    if mask.shape != (n, 1, h, w):
        raise ValueError(f"masked_gap: mask shape {mask.shape} does not match feature {(n, 1, h, w)}")
    m = (mask.reshape(n, h * w) == 1).astype(feature.dtype)
    count = m.sum(axis=1, keepdims=True)
    empty = count[:, 0] == 0
    if empty.any():
        m[empty] = 1.0
        count[empty] = h * w
        if stats is not None:
            stats.fallbacks += int(empty.sum())
    weights = m / count
    flat = feature.data.reshape(n, d, h * w)
    out = np.matmul(flat, weights[:, :, None])[:, :, 0]

    def bw(g):
        return ((g[:, :, None] * weights[:, None, :]).reshape(n, d, h, w),)

    return Tensor._make(out, (feature,), bw)


def init_sdpm(store: ParamStore, dim: int, rng: np.random.Generator, ratio: int = 4) -> None:
    hidden = max(dim // ratio, 1)
    init_fc(store, "sdpm.sse.fc1", hidden, dim, rng)
    init_fc(store, "sdpm.sse.fc2", dim, hidden, rng)


def sse_reweight_vector(prototype: Tensor, params: ParamStore) -> Tensor:
    """sigmoid(FC2(relu(FC1(p)))) -- one weight in (0, 1) per channel."""
    hidden = relu(fully_connected(prototype, params["sdpm.sse.fc1.weight"], params["sdpm.sse.fc1.bias"]))
    return sigmoid(fully_connected(hidden, params["sdpm.sse.fc2.weight"], params["sdpm.sse.fc2.bias"]))


def channel_reweight(feature: Tensor, v: Tensor) -> Tensor:
    """Average of the channel-scaled feature and the feature itself."""
    n, d = v.shape
    return (v.reshape(n, d, 1, 1) * feature + feature) * 0.5


def _softmax64(x: np.ndarray) -> np.ndarray:
    z = x.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def self_distill_loss(p_support: Tensor, p_query: Tensor) -> Tensor:
    """KL(d_t || d_s) averaged over the batch.

    ``d_s`` and ``d_q`` are channel softmaxes of the two prototypes and the
    teacher ``d_t = (d_s + d_q) / 2`` is held constant, so gradient only
    reaches the support prototype.
    """
    if p_support.shape != p_query.shape:
        raise ValueError(f"prototype shapes differ: {p_support.shape} vs {p_query.shape}")
    ps = p_support.data if p_support.ndim == 2 else p_support.data[None]
    pq = p_query.data if p_query.ndim == 2 else p_query.data[None]
    n = ps.shape[0]
    d_s = _softmax64(ps)
    d_t = (d_s + _softmax64(pq)) / 2.0
    # sum of d_t * log(d_t / d_s), with 0 * log 0 = 0
    ratio = np.where(d_t > 0, d_t / d_s, 1.0)
    per_row = np.maximum((d_t * np.log(ratio)).sum(axis=1), 0.0)
    value = np.asarray(per_row.mean(), dtype=p_support.dtype)
    grad_dir = ((d_s - d_t) / n).astype(p_support.dtype).reshape(p_support.shape)

    return Tensor._make(value, (p_support,), lambda g: (g * grad_dir,))


@dataclass
class SdpmOutput:
    intrinsic_prototype: Tensor  # (N, D)
    query_feature: Tensor  # (N, D, h, w)
    kd_loss: Tensor  # scalar
    support_features: list = field(default_factory=list)  # reweighted, one per shot
    support_prototypes: list = field(default_factory=list)
    reweight_vectors: list = field(default_factory=list)


def sdpm_forward(
    support_features: Sequence[Tensor],
    support_masks: Sequence[np.ndarray],
    query_feature: Tensor,
    query_mask: Optional[np.ndarray],
    strategy,
    params: ParamStore,
    stats: Optional[GapStats] = None,
    kd_support_features: Optional[Sequence[Tensor]] = None,
) -> SdpmOutput:
    """Run SDPM over K support shots and one query (all batched along N).

    ``query_mask`` is only given during training; without it no teacher is
    built and the distillation loss is zero.

    ``kd_support_features`` optionally gives the support features the
    distillation loss is computed from. They must hold the same values as
    ``support_features``; passing versions cut from part of the graph limits
    which weights the loss trains, as a frozen backbone does.
    """
    k = len(support_features)
    if k == 0:
        raise ValueError("sdpm_forward needs at least one support sample")
    if len(support_masks) != k:
        raise ValueError(f"{k} support features but {len(support_masks)} masks")
    strategy = KShotStrategy.parse(strategy)

    vectors, reweighted, protos = [], [], []
    for feat, mask in zip(support_features, support_masks):
        p = masked_gap(feat, mask, stats)
        v = sse_reweight_vector(p, params)
        f_tilde = channel_reweight(feat, v)
        vectors.append(v)
        reweighted.append(f_tilde)
        protos.append(masked_gap(f_tilde, mask, stats))

    inv_k = 1.0 / k
    if strategy is KShotStrategy.INTEGRAL:
        v_mean = vectors[0]
        for v in vectors[1:]:
            v_mean = v_mean + v
        v_mean = v_mean * inv_k
        q_tilde = channel_reweight(query_feature, v_mean)
        q_per_shot = None
    else:
        q_per_shot = [channel_reweight(query_feature, v) for v in vectors]
        q_tilde = q_per_shot[0]
        for q in q_per_shot[1:]:
            q_tilde = q_tilde + q
        q_tilde = q_tilde * inv_k

    intrinsic = protos[0]
    for p in protos[1:]:
        intrinsic = intrinsic + p
    intrinsic = intrinsic * inv_k

    if query_mask is None:
        kd = Tensor(np.zeros((), dtype=query_feature.dtype))
    else:
        kd_protos = protos
        if kd_support_features is not None:
            if len(kd_support_features) != k:
                raise ValueError(f"{k} support features but {len(kd_support_features)} for distillation")
            kd_protos = []
            for feat, mask in zip(kd_support_features, support_masks):
                v = sse_reweight_vector(masked_gap(feat, mask), params)
                kd_protos.append(masked_gap(channel_reweight(feat, v), mask))
        if strategy is KShotStrategy.INTEGRAL:
            teacher = masked_gap(q_tilde, query_mask, stats)
            losses = [self_distill_loss(p, teacher) for p in kd_protos]
        else:
            losses = [self_distill_loss(p, masked_gap(q, query_mask, stats)) for p, q in zip(kd_protos, q_per_shot)]
        kd = losses[0]
        for loss in losses[1:]:
            kd = kd + loss
        kd = kd * inv_k

    return SdpmOutput(
        intrinsic_prototype=intrinsic,
        query_feature=q_tilde,
        kd_loss=kd,
        support_features=reweighted,
        support_prototypes=protos,
        reweight_vectors=vectors,
    )
