"""Class mIoU and similarity maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class ClassIoU:
    """Accumulates foreground intersection and union per class over episodes."""

    def __init__(self, class_ids):
        self.class_ids = list(class_ids)
        self.intersection = {c: 0 for c in self.class_ids}
        self.union = {c: 0 for c in self.class_ids}

    def update(self, class_id: int, pred: np.ndarray, target: np.ndarray) -> None:
        pred = np.asarray(pred).astype(bool)
        target = np.asarray(target).astype(bool)
        if pred.shape != target.shape:
            raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
        self.intersection[class_id] += int(np.count_nonzero(pred & target))
        self.union[class_id] += int(np.count_nonzero(pred | target))

    def per_class(self) -> dict:
        # classes never seen (union 0) are left out of the mean
        return {c: self.intersection[c] / self.union[c] for c in self.class_ids if self.union[c] > 0}

    def miou(self) -> float:
        ious = self.per_class()
        return float(np.mean(list(ious.values()))) if ious else 0.0


@dataclass
class EvalReport:
    per_class_iou: dict
    miou: float
    episodes: int
    fold: int
    fallbacks: int = 0
    extra: dict = field(default_factory=dict)

    def metrics_line(self, iteration: int) -> str:
        fields = [f"iter={iteration}", f"fold={self.fold}", f"miou={self.miou:.4f}", f"episodes={self.episodes}"]
        fields += [f"{k}={v}" for k, v in self.extra.items()]
        fields += [f"iou_{c}={v:.4f}" for c, v in sorted(self.per_class_iou.items())]
        fields.append(f"fallbacks={self.fallbacks}")
        return " ".join(fields)


def cosine_similarity_map(feature, prototype, eps: float = 1e-8) -> np.ndarray:
    """cos(x_ij, p) at every position of a (1, D, h, w) feature; returns (1, 1, h, w)."""
    f = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    p = prototype.data if isinstance(prototype, Tensor) else np.asarray(prototype)
    p = p.reshape(f.shape[0], f.shape[1], 1, 1)
    dot = (f * p).sum(axis=1, keepdims=True)
    norms = np.sqrt((f * f).sum(axis=1, keepdims=True)) * np.sqrt((p * p).sum(axis=1, keepdims=True))
    return np.clip(dot / (norms + eps), -1.0, 1.0)
