"""Episodic training and evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import IMAGE_SIZE, _sub_seed, fold_classes, sample_episode
from .functional import resize_array
from .metrics import ClassIoU, EvalReport
from .model import KD_ROUTES, ModelConfig, SDAANet
from .params import ParamStore
from .sdpm import KShotStrategy
from .tensor import backward, no_grad

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    max_iter: int = 2000
    batch_size: int = 4
    alpha: float = 50.0
    beta: float = 0.5
    k: int = 1
    strategy: str = "separate"
    seed: int = 0
    fold: int = 0
    image_size: int = IMAGE_SIZE
    widths: tuple = (16, 32, 64, 64)
    feat_dim: int = 64
    log_every: int = 100
    grad_clip: float = 0.0  # global gradient-norm cap; 0 disables
    kd_route: str = "sse"

    def __post_init__(self):
        self.strategy = KShotStrategy.parse(self.strategy).value
        self.widths = tuple(int(w) for w in self.widths)
        positive = ("base_lr", "max_iter", "batch_size", "k", "image_size", "feat_dim", "log_every", "power")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("momentum", "weight_decay", "alpha", "beta", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.power > 1:
            raise ValueError(f"power must be in (0, 1], got {self.power}")
        if not 0 <= self.fold <= 3:
            raise ValueError(f"fold must be in 0..3, got {self.fold}")
        if self.kd_route not in KD_ROUTES:
            raise ValueError(f"kd_route must be one of {KD_ROUTES}, got {self.kd_route!r}")
        if self.image_size % 8:
            raise ValueError(f"image_size must be divisible by 8, got {self.image_size}")

    def model_config(self, use_sdpm: bool = True, use_saam: bool = True) -> ModelConfig:
        return ModelConfig(
            widths=self.widths, feat_dim=self.feat_dim, use_sdpm=use_sdpm, use_saam=use_saam,
            kd_route=self.kd_route,
        )


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for _, p in params.items() if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = np.asarray(max_norm / total, dtype=params.dtype)
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= scale
    return total


def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float = 0.9) -> float:
    return base_lr * (1.0 - iteration / max_iter) ** power


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity."""

    def __init__(self, params: ParamStore, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        m = np.asarray(self.momentum, dtype=self.params.dtype)
        wd = np.asarray(self.weight_decay, dtype=self.params.dtype)
        lr = np.asarray(lr, dtype=self.params.dtype)
        for name, p in self.params.items():
            v = self.velocity[name]
            grad = p.grad if p.grad is not None else 0.0
            v *= m
            v += grad + wd * p.data
            p.data -= lr * v


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, state: Optional[SGD] = None) -> SGD:
    """One update; pass the returned optimiser back in to carry momentum."""
    opt = state if state is not None else SGD(params, momentum, weight_decay)
    opt.step(lr)
    return opt


@dataclass
class TrainResult:
    params: ParamStore
    log: list = field(default_factory=list)
    totals: list = field(default_factory=list)
    fallbacks: int = 0


def train_episode_seed(seed: int, step: int, index: int) -> int:
    return _sub_seed(seed, 3, step, index)


def eval_episode_seed(seed: int, index: int) -> int:
    return _sub_seed(seed, 7, index)


def train(cfg: TrainConfig, use_sdpm: bool = True, use_saam: bool = True, progress: bool = False) -> TrainResult:
    """Train from scratch on the folds other than ``cfg.fold``.

    A disabled SDPM falls back to plain masked-GAP prototypes with no
    distillation term; a disabled SAAM feeds an all-ones attention map and
    drops the support cross-entropy.
    """
    net = SDAANet.create(cfg.model_config(use_sdpm, use_saam), cfg.seed, cfg.strategy)
    opt = SGD(net.params, cfg.momentum, cfg.weight_decay)
    result = TrainResult(params=net.params)
    window = []
    for step in range(cfg.max_iter):
        episodes = [
            sample_episode("train", cfg.fold, cfg.k, train_episode_seed(cfg.seed, step, b), cfg.image_size)
            for b in range(cfg.batch_size)
        ]
        out = net.forward_episode(episodes, "train", cfg.alpha, cfg.beta)
        backward(out.losses.total_tensor, net.params)
        if cfg.grad_clip > 0:
            clip_grad_norm(net.params, cfg.grad_clip)
        lr = poly_lr(step, cfg.max_iter, cfg.base_lr, cfg.power)
        opt.step(lr)
        lb = out.losses
        result.totals.append(lb.total)
        window.append((lb.total, lb.seg_ce, lb.kd, lb.support_ce))
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.max_iter:
            mean = np.mean(window, axis=0)
            line = (
                f"iter={step + 1} fold={cfg.fold} loss={mean[0]:.4f} seg_ce={mean[1]:.4f} "
                f"kd={mean[2]:.6f} support_ce={mean[3]:.4f} lr={lr:.6f}"
            )
            result.log.append(line)
            window = []
            if progress:
                logger.info(line)
    result.fallbacks = net.stats.fallbacks
    return result


def predict(net: SDAANet, episodes, multi_scale: bool = False) -> np.ndarray:
    """Binary foreground predictions (B, H, W) without touching query masks."""
    with no_grad():
        out = net.forward_episode(episodes, "eval")
    logits = out.logits.data
    if not multi_scale:
        return logits[:, 1] > logits[:, 0]
    h, w = logits.shape[2:]
    low = out.low_res_logits.data
    big = resize_array(low, int(round(1.5 * h)), int(round(1.5 * w)))
    probs = _softmax_channels(logits) + resize_array(_softmax_channels(big), h, w)
    return probs[:, 1] > probs[:, 0]


def _softmax_channels(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def evaluate(
    params: ParamStore,
    fold: int,
    episodes: int,
    k: int = 1,
    strategy="separate",
    multi_scale: bool = False,
    seed: int = 0,
    image_size: int = IMAGE_SIZE,
    batch: int = 8,
) -> EvalReport:
    """Class mIoU over ``episodes`` test episodes of ``fold``.

    Intersections and unions are summed per class across episodes before
    dividing, then averaged over the fold's classes.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    net = SDAANet.from_params(params, strategy)
    meter = ClassIoU(fold_classes(fold))
    for start in range(0, episodes, batch):
        eps = [sample_episode("test", fold, k, eval_episode_seed(seed, i), image_size) for i in range(start, min(start + batch, episodes))]
        preds = predict(net, eps, multi_scale)
        for ep, pred in zip(eps, preds):
            meter.update(ep.class_id, pred, ep.query.mask[0, 0])
    return EvalReport(
        per_class_iou=meter.per_class(),
        miou=meter.miou(),
        episodes=episodes,
        fold=fold,
        fallbacks=net.stats.fallbacks,
        extra={"k": k, "strategy": KShotStrategy.parse(strategy).value, "multi_scale": int(multi_scale)},
    )


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
