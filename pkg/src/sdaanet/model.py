"""The full few-shot segmentation network.

Shared encoder -> SDPM (intrinsic prototype, reweighted query feature) and
SAAM (query attention) -> fusion decoder. Either module can be switched off
for ablations; a disabled module contributes no parameters and no loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Episode, downsample_mask
from .functional import bilinear_resize, conv2d, default_groups, group_norm, relu
from .params import ParamStore, init_conv, init_norm
from .saam import DEFAULT_BINS, init_saam, pixel_cross_entropy, saam_forward
from .sdpm import GapStats, KShotStrategy, init_sdpm, masked_gap, sdpm_forward
from .tensor import Tensor, concat

OUTPUT_STRIDE = 8
KD_ROUTES = ("features", "reduce", "sse")


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (16, 32, 64, 64)
    feat_dim: int = 64
    bins: tuple = DEFAULT_BINS
    sse_ratio: int = 4
    use_sdpm: bool = True
    use_saam: bool = True
    # which weights the distillation loss trains: "features" (everything
    # upstream), "reduce" (the 1x1 reduction conv and SSE) or "sse" (SSE only)
    kd_route: str = "sse"

    def __post_init__(self):
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ValueError(f"encoder needs four positive stage widths, got {self.widths}")
        if self.feat_dim < 1:
            raise ValueError(f"feat_dim must be positive, got {self.feat_dim}")
        if self.kd_route not in KD_ROUTES:
            raise ValueError(f"kd_route must be one of {KD_ROUTES}, got {self.kd_route!r}")


@dataclass
class LossBundle:
    seg_ce: float
    kd: float
    support_ce: float
    total: float
    alpha: float
    beta: float
    total_tensor: Optional[Tensor] = field(default=None, repr=False)


@dataclass
class EpisodeOutput:
    logits: Tensor  # (B, 2, H, W)
    losses: Optional[LossBundle]
    attention: Tensor  # (B, 1, h, w)
    prototype: Tensor  # (B, D)
    support_features: list  # features the prototype was pooled from, one per shot
    low_res_logits: Tensor  # (B, 2, h, w), before upsampling
    query_feature: Optional[Tensor] = None  # what the decoder saw, (B, D, h, w)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Build every parameter the configuration uses, in a fixed order."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    w1, w2, w3, w4 = cfg.widths
    d = cfg.feat_dim
    for i, (cout, cin) in enumerate(zip(cfg.widths, (3, *cfg.widths[:-1])), start=1):
        init_conv(store, f"enc.conv{i}", cout, cin, 3, rng)
        init_norm(store, f"enc.norm{i}", cout)
    init_conv(store, "enc.reduce", d, w4, 1, rng)
    if cfg.use_sdpm:
        init_sdpm(store, d, rng, cfg.sse_ratio)
    if cfg.use_saam:
        init_saam(store, d, rng, cfg.bins)
    init_conv(store, "dec.conv1", d, 2 * d + 1, 3, rng)
    init_conv(store, "dec.conv2", d, d, 3, rng)
    init_conv(store, "dec.cls", 2, d, 1, rng)
    return store


def infer_config(params: ParamStore) -> ModelConfig:
    """Recover the architecture from parameter names and shapes."""
    widths = tuple(params[f"enc.conv{i}.weight"].shape[0] for i in range(1, 5))
    d = params["enc.reduce.weight"].shape[0]
    use_saam = "saam.ppm.merge.weight" in params
    bins = DEFAULT_BINS
    if use_saam:
        bins = tuple(sorted(int(n.split(".")[2][3:]) for n in params.with_prefix("saam.ppm.bin") if n.endswith(".weight")))
    ratio = 4
    if "sdpm.sse.fc1.weight" in params:
        ratio = max(d // params["sdpm.sse.fc1.weight"].shape[0], 1)
    return ModelConfig(widths=widths, feat_dim=d, bins=bins, sse_ratio=ratio, use_sdpm="sdpm.sse.fc1.weight" in params, use_saam=use_saam)


def _conv(x: Tensor, params: ParamStore, name: str, stride: int = 1, padding: int = 0) -> Tensor:
    return conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=padding)


def _norm(x: Tensor, params: ParamStore, name: str) -> Tensor:
    return group_norm(x, params[f"{name}.weight"], params[f"{name}.bias"], default_groups(x.shape[1]))


def encode_trunk(images: Tensor, params: ParamStore) -> Tensor:
    """Four conv-norm-relu stages, three of them stride 2."""
    x = images
    for i, stride in enumerate((2, 2, 2, 1), start=1):
        x = _norm(_conv(x, params, f"enc.conv{i}", stride=stride, padding=1), params, f"enc.norm{i}")
        x = relu(x)
    return x


def reduce_features(trunk: Tensor, params: ParamStore) -> Tensor:
    return relu(_conv(trunk, params, "enc.reduce"))


def encode(images: Tensor, params: ParamStore) -> Tensor:
    """(N, 3, H, W) -> (N, D, H/8, W/8); the same weights serve support and query."""
    return reduce_features(encode_trunk(images, params), params)


def decode(prototype: Tensor, query_feature: Tensor, attention: Tensor, params: ParamStore, out_size: tuple) -> tuple:
    """Fuse [query feature | tiled prototype | attention] and predict 2-class logits.

    Returns ``(logits at out_size, logits at feature resolution)``.
    """
    n, d, h, w = query_feature.shape
    tiled = prototype.reshape(n, d, 1, 1).broadcast_to((n, d, h, w))
    x = concat([query_feature, tiled, attention], axis=1)
    x = relu(_conv(x, params, "dec.conv1", padding=1))
    x = relu(_conv(x, params, "dec.conv2", padding=1))
    low = _conv(x, params, "dec.cls")
    return bilinear_resize(low, out_size[0], out_size[1], align_corners=True), low


def _batch(episodes: Sequence[Episode], dtype):
    k = episodes[0].k
    if any(ep.k != k for ep in episodes):
        raise ValueError("all episodes in a batch need the same K")
    images = [np.concatenate([ep.support[i].image for ep in episodes]) for i in range(k)]
    images.append(np.concatenate([ep.query.image for ep in episodes]))
    support_masks = [np.concatenate([ep.support[i].mask for ep in episodes]) for i in range(k)]
    return k, np.concatenate(images).astype(dtype, copy=False), support_masks


class SDAANet:
    """Parameters plus architecture; all forward logic is batched over episodes."""

    def __init__(self, cfg: ModelConfig, params: ParamStore, strategy=KShotStrategy.SEPARATE):
        self.cfg = cfg
        self.params = params
        self.strategy = KShotStrategy.parse(strategy)
        self.stats = GapStats()

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int, strategy=KShotStrategy.SEPARATE, dtype=np.float32) -> "SDAANet":
        return cls(cfg, init_params(cfg, seed, dtype), strategy)

    @classmethod
    def from_params(cls, params: ParamStore, strategy=KShotStrategy.SEPARATE) -> "SDAANet":
        return cls(infer_config(params), params, strategy)

    def forward_episode(self, episodes, mode: str = "train", alpha: float = 50.0, beta: float = 0.5) -> EpisodeOutput:
        """Run a batch of episodes end to end.

        In ``"eval"`` mode the query masks are never read.
        """
        if isinstance(episodes, Episode):
            episodes = [episodes]
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        params, dtype = self.params, self.params.dtype
        k, images, support_masks_full = _batch(episodes, dtype)
        b = len(episodes)
        size = images.shape[2:]

        trunk = encode_trunk(Tensor(images), params)
        feats = reduce_features(trunk, params)
        h, w = feats.shape[2:]
        f_support = [feats[i * b : (i + 1) * b] for i in range(k)]
        f_query = feats[k * b :]
        m_support = [downsample_mask(m, h, w) for m in support_masks_full]

        query_mask_full = query_mask = None
        if mode == "train":
            query_mask_full = np.concatenate([ep.query.mask for ep in episodes])
            query_mask = downsample_mask(query_mask_full, h, w)

        zero = Tensor(np.zeros((), dtype=dtype))
        if self.cfg.use_sdpm:
            kd_feats = None
            if mode == "train" and self.cfg.kd_route == "sse":
                kd_feats = [f.detach() for f in f_support]
            elif mode == "train" and self.cfg.kd_route == "reduce":
                cut = reduce_features(trunk[: k * b].detach(), params)
                kd_feats = [cut[i * b : (i + 1) * b] for i in range(k)]
            sd = sdpm_forward(
                f_support, m_support, f_query, query_mask, self.strategy, params, self.stats,
                kd_support_features=kd_feats,
            )
            prototype, q_feat, kd = sd.intrinsic_prototype, sd.query_feature, sd.kd_loss
            support_view = sd.support_features
        else:
            prototype = masked_gap(f_support[0], m_support[0], self.stats)
            for f, m in zip(f_support[1:], m_support[1:]):
                prototype = prototype + masked_gap(f, m, self.stats)
            prototype = prototype * (1.0 / k)
            q_feat, kd = f_query, zero
            support_view = f_support

        if self.cfg.use_saam:
            sa = saam_forward(f_support, m_support, f_query, params, self.cfg.bins, self.stats)
            attention, support_ce = sa.query_attention, sa.support_ce_loss
        else:
            attention = Tensor(np.ones((b, 1, h, w), dtype=dtype))
            support_ce = zero

        logits, low = decode(prototype, q_feat, attention, params, size)

        losses = None
        if mode == "train":
            seg = pixel_cross_entropy(logits, query_mask_full)
            total = seg + kd * alpha + support_ce * beta
            losses = LossBundle(
                seg_ce=seg.item(), kd=kd.item(), support_ce=support_ce.item(), total=total.item(),
                alpha=alpha, beta=beta, total_tensor=total,
            )
        return EpisodeOutput(logits, losses, attention, prototype, support_view, low, q_feat)
