"""Synthetic shapes corpus and K-shot episode sampling.

Twelve shape families are split into four folds of three classes. Training
episodes draw from the three folds that are not under test, so test classes
are never seen during training.
"""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .functional import resize_array
from .pnm import write_pgm, write_ppm

CLASS_NAMES = (
    "circle", "square", "triangle",
    "cross", "ring", "star",
    "bar-h", "bar-v", "l-shape",
    "t-shape", "diamond", "crescent",
)
NUM_CLASSES = len(CLASS_NAMES)
NUM_FOLDS = 4
IMAGE_SIZE = 64
MIN_FG = 16
MAX_ATTEMPTS = 10
MAX_ROTATION = np.deg2rad(20.0)
HUE_JITTER = 0.035


class DegenerateSampleError(RuntimeError):
    pass


# ----------------------------------------------------------------- geometry
# Each predicate takes shape-local coordinates (u, v), v pointing down, and
# returns the inside region. Every shape fits inside the unit disk.
def _polygon(verts: np.ndarray) -> Callable:
    def inside(u, v):
        # even-odd rule
        res = np.zeros(u.shape, dtype=bool)
        n = len(verts)
        for k in range(n):
            x1, y1 = verts[k]
            x2, y2 = verts[(k + 1) % n]
            crosses = (y1 > v) != (y2 > v)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = (x2 - x1) * (v - y1) / (y2 - y1) + x1
            res ^= crosses & (u < xint)
        return res

    return inside


def _star_vertices(points: int = 5, outer: float = 1.0, inner: float = 0.45) -> np.ndarray:
    ang = -np.pi / 2 + np.arange(2 * points) * np.pi / points
    rad = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)


_TRIANGLE = np.array([[0.0, -1.0], [np.sqrt(3) / 2, 0.5], [-np.sqrt(3) / 2, 0.5]])
SQUARE_HALF_SIDE = 1.0 / np.sqrt(2.0)

SHAPES: dict[str, Callable] = {
    "circle": lambda u, v: u * u + v * v <= 1.0,
    "square": lambda u, v: (np.abs(u) <= SQUARE_HALF_SIDE) & (np.abs(v) <= SQUARE_HALF_SIDE),
    "triangle": _polygon(_TRIANGLE),
    "cross": lambda u, v: ((np.abs(u) <= 0.25) & (np.abs(v) <= 0.9)) | ((np.abs(v) <= 0.25) & (np.abs(u) <= 0.9)),
    "ring": lambda u, v: (u * u + v * v <= 1.0) & (u * u + v * v >= 0.55**2),
    "star": _polygon(_star_vertices()),
    "bar-h": lambda u, v: (np.abs(u) <= 0.95) & (np.abs(v) <= 0.25),
    "bar-v": lambda u, v: (np.abs(u) <= 0.25) & (np.abs(v) <= 0.95),
    "l-shape": lambda u, v: ((u >= -0.7) & (u <= -0.2) & (np.abs(v) <= 0.7)) | ((np.abs(u) <= 0.7) & (v >= 0.2) & (v <= 0.7)),
    "t-shape": lambda u, v: ((np.abs(u) <= 0.7) & (v >= -0.7) & (v <= -0.3)) | ((np.abs(u) <= 0.2) & (np.abs(v) <= 0.7)),
    "diamond": lambda u, v: np.abs(u) / 0.6 + np.abs(v) / 0.95 <= 1.0,
    "crescent": lambda u, v: (u * u + v * v <= 1.0) & ((u - 0.45) ** 2 + v * v > 0.8**2),
}


# -------------------------------------------------------------------- folds
def fold_classes(fold: int) -> list[int]:
    if not 0 <= fold < NUM_FOLDS:
        raise ValueError(f"fold must be in 0..{NUM_FOLDS - 1}, got {fold}")
    per = NUM_CLASSES // NUM_FOLDS
    return list(range(fold * per, (fold + 1) * per))


def split_classes(split: str, test_fold: int) -> list[int]:
    test = fold_classes(test_fold)
    if split == "test":
        return test
    if split == "train":
        return [c for c in range(NUM_CLASSES) if c not in test]
    raise ValueError(f"split must be 'train' or 'test', got {split!r}")


def class_id(name_or_id) -> int:
    if isinstance(name_or_id, str):
        return CLASS_NAMES.index(name_or_id)
    cid = int(name_or_id)
    if not 0 <= cid < NUM_CLASSES:
        raise ValueError(f"unknown class id {cid}")
    return cid


# ---------------------------------------------------------------- rendering
@dataclass
class Sample:
    image: np.ndarray  # (1, 3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, 1, H, W) float32 in {0, 1}
    class_id: int
    params: dict = field(default_factory=dict)

    @property
    def fg_count(self) -> int:
        return int(self.mask.sum())


def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    cells = int(rng.integers(3, 9))
    grid = rng.uniform(0.0, 1.0, size=(3, cells, cells)).astype(np.float32)
    base = resize_array(grid, size, size, align_corners=True)
    fine = rng.uniform(0.0, 1.0, size=(3, 16, 16)).astype(np.float32)
    detail = resize_array(fine, size, size, align_corners=True)
    return 0.75 * base + 0.25 * detail


def _shape_mask(name: str, size: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / radius
    v = (-s * dx + c * dy) / radius
    return SHAPES[name](u, v)


def _random_placement(rng: np.random.Generator, size: int) -> dict:
    scale = size / 64.0
    radius = float(rng.uniform(9.0, 20.0) * scale)
    lo, hi = radius + 1.0, size - radius - 2.0
    return {
        "cx": float(rng.uniform(lo, hi)),
        "cy": float(rng.uniform(lo, hi)),
        "radius": radius,
        "angle": float(rng.uniform(-MAX_ROTATION, MAX_ROTATION)),
    }


def class_color(cid: int, rng: np.random.Generator) -> np.ndarray:
    """Class hue with small jitter (shared trait) at a random brightness (per instance)."""
    per = NUM_CLASSES // NUM_FOLDS
    slot = (cid % per) * NUM_FOLDS + cid // per  # each fold spans the hue circle
    hue = (slot / NUM_CLASSES + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
    sat = rng.uniform(0.6, 0.95)
    val = rng.uniform(0.45, 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float32)


def _paint(img: np.ndarray, region: np.ndarray, color: np.ndarray, rng: np.random.Generator) -> None:
    shade = rng.uniform(-0.08, 0.08, size=2)
    h = img.shape[1]
    ramp = (shade[0] * np.linspace(-1, 1, h)[:, None] + shade[1] * np.linspace(-1, 1, h)[None, :]).astype(np.float32)
    for ch in range(3):
        img[ch][region] = (color[ch] + ramp)[region]


def generate_sample(class_id_: int, rng_seed: int, size: int = IMAGE_SIZE, min_fg: int = MIN_FG) -> Sample:
    """Render one shape of ``class_id_`` onto a textured background.

    Zero to two distractor shapes of other classes are painted first, then
    the target on top; the mask is exactly the target's painted region.
    """
    cid = class_id(class_id_)
    rng = np.random.default_rng(rng_seed)
    for _ in range(MAX_ATTEMPTS):
        img = _value_noise(rng, size)
        n_distract = int(rng.choice(3, p=[0.4, 0.35, 0.25]))
        others = [c for c in range(NUM_CLASSES) if c != cid]
        for _d in range(n_distract):
            dcls = int(rng.choice(others))
            p = _random_placement(rng, size)
            _paint(img, _shape_mask(CLASS_NAMES[dcls], size, **p), class_color(dcls, rng), rng)
        place = _random_placement(rng, size)
        region = _shape_mask(CLASS_NAMES[cid], size, **place)
        if region.sum() < min_fg:
            continue
        _paint(img, region, class_color(cid, rng), rng)
        img += rng.normal(0.0, 0.03, size=img.shape).astype(np.float32)
        np.clip(img, 0.0, 1.0, out=img)
        return Sample(
            image=img[None].astype(np.float32),
            mask=region[None, None].astype(np.float32),
            class_id=cid,
            params={**place, "distractors": n_distract},
        )
    raise DegenerateSampleError(f"class {CLASS_NAMES[cid]} seed {rng_seed}: foreground below {min_fg} px after {MAX_ATTEMPTS} attempts")


# ----------------------------------------------------------------- episodes
@dataclass
class Episode:
    support: list[Sample]
    query: Sample
    class_id: int
    seed: int

    @property
    def k(self) -> int:
        return len(self.support)

    def to_bytes(self) -> bytes:
        parts = [np.array([self.class_id, self.seed, self.k], dtype=np.int64).tobytes()]
        for s in [*self.support, self.query]:
            parts.append(s.image.tobytes())
            parts.append(s.mask.tobytes())
        return b"".join(parts)


def _sub_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1, dtype=np.uint32)[0])


def make_episode(class_id_: int, k: int, seed: int, size: int = IMAGE_SIZE) -> Episode:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    cid = class_id(class_id_)
    support = [generate_sample(cid, _sub_seed(seed, 1, i), size) for i in range(k)]
    query = generate_sample(cid, _sub_seed(seed, 2), size)
    return Episode(support=support, query=query, class_id=cid, seed=seed)


def sample_episode(split: str, test_fold: int, k: int, rng_seed: int, size: int = IMAGE_SIZE) -> Episode:
    """Draw a class uniformly from ``split`` and build a K-shot episode for it."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    classes = split_classes(split, test_fold)
    rng = np.random.default_rng(_sub_seed(rng_seed, 0))
    cid = classes[int(rng.integers(len(classes)))]
    return make_episode(cid, k, rng_seed, size)


def downsample_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize: output (i, j) reads input (floor(i*H/oh), floor(j*W/ow))."""
    h, w = mask.shape[-2:]
    if (h, w) == (out_h, out_w):
        return mask
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return mask[..., rows[:, None], cols[None, :]]


# ------------------------------------------------------------------- corpus
def dump_corpus(out_dir: str | os.PathLike, per_class: int, seed: int, size: int = IMAGE_SIZE) -> list[str]:
    """Write ``per_class`` samples per class as PPM images and PGM masks."""
    written = []
    for cid, name in enumerate(CLASS_NAMES):
        cdir = os.path.join(out_dir, name)
        os.makedirs(cdir, exist_ok=True)
        for i in range(per_class):
            s = generate_sample(cid, _sub_seed(seed, cid, i), size)
            rgb = np.floor(s.image[0].transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
            img_path = os.path.join(cdir, f"{i:04d}_image.ppm")
            mask_path = os.path.join(cdir, f"{i:04d}_mask.pgm")
            write_ppm(img_path, rgb)
            write_pgm(mask_path, (s.mask[0, 0] * 255).astype(np.uint8))
            written += [img_path, mask_path]
    return written
