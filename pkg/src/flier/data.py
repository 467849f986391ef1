"""Procedural few-shot image classes, episodes and augmentation."""
from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import io
from .rng import stream

SHAPES = ("disk", "square", "ring", "cross", "bar")
DEFAULT_SHOTS = (1, 2, 4, 8, 16)
N_VARIANTS = 10
_OFFSETS = ((0, 0), (-5, -5), (-5, 5), (5, -5), (5, 5))
_SPLIT_IDS = {"train": 0, "test": 1, "pretrain": 2}


class EpisodeError(ValueError):
    pass


class InsufficientCacheError(EpisodeError):
    pass


def class_params(n_classes: int) -> list[dict]:
    """Every class gets its own hue; shapes cycle through :data:`SHAPES`."""
    return [{"class": c, "shape": SHAPES[c % len(SHAPES)], "hue": c / n_classes}
            for c in range(n_classes)]


def _shape_distance(shape: str, x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    if shape == "disk":
        return np.hypot(x, y) - r
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) - 0.85 * r
    if shape == "ring":
        return np.abs(np.hypot(x, y) - 0.8 * r) - 0.3 * r
    if shape == "cross":
        arm = 0.3 * r
        return np.minimum(np.maximum(np.abs(x) - arm, np.abs(y) - r),
                          np.maximum(np.abs(y) - arm, np.abs(x) - r))
    if shape == "bar":
        return np.maximum(np.abs(x) - r, np.abs(y) - 0.35 * r)
    raise ValueError(f"unknown shape {shape!r}")


def render(params: dict, variant: int, rng: np.random.Generator, noise: float,
           size: int = 32) -> np.ndarray:
    """One [3,size,size] image of a class.

    ``variant`` picks one of ten placements (five positions x two sizes);
    ``noise`` scales hue jitter, background clutter and pixel noise.
    """
    dy, dx = _OFFSETS[variant % len(_OFFSETS)]
    radius = (0.2 if variant < len(_OFFSETS) else 0.28) * size
    radius *= rng.uniform(0.9, 1.1)
    cy = size / 2 - 0.5 + dy * size / 32 + rng.uniform(-1.5, 1.5)
    cx = size / 2 - 0.5 + dx * size / 32 + rng.uniform(-1.5, 1.5)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = _shape_distance(params["shape"], xx - cx, yy - cy, radius)
    mask = 1.0 / (1.0 + np.exp(np.clip(2.0 * d, -50, 50)))

    hue = (params["hue"] + rng.normal(0.0, 0.05 * noise)) % 1.0
    sat = rng.uniform(0.6, 0.9)
    val = rng.uniform(0.7, 1.0)
    fg = np.array(colorsys.hsv_to_rgb(hue, sat, val))

    bg_level = rng.uniform(0.15, 0.35)
    bg = np.full((3, size, size), bg_level)
    if noise > 0:
        # low-frequency colored clutter
        coarse = rng.normal(0.0, 0.25 * noise, size=(3, 4, 4))
        bg = bg + ndimage.zoom(coarse, (1, size / 4, size / 4), order=1)
    img = bg * (1.0 - mask) + fg[:, None, None] * mask
    if noise > 0:
        img = img + rng.normal(0.0, 0.2 * noise, size=img.shape)
    return img


@dataclass
class SyntheticDataset:
    n_classes: int
    seed: int
    noise: float
    image_size: int
    per_class: dict
    splits: dict = field(repr=False)

    def images(self, split: str) -> np.ndarray:
        return self.splits[split]["images"]

    def labels(self, split: str) -> np.ndarray:
        return self.splits[split]["labels"]

    def variants(self, split: str) -> np.ndarray:
        return self.splits[split]["variants"]

    def split_hash(self, split: str = "test") -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images(split), dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels(split), dtype="<i8").tobytes())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "seed": self.seed,
            "noise": self.noise,
            "image_size": self.image_size,
            "per_class": dict(self.per_class),
            "class_params": class_params(self.n_classes),
            "split_hashes": {s: self.split_hash(s) for s in self.splits},
        }

    def save(self, path) -> None:
        tensors = {}
        for split, d in self.splits.items():
            tensors[f"{split}/images"] = d["images"]
            tensors[f"{split}/labels"] = d["labels"].astype(np.float64)
            tensors[f"{split}/variants"] = d["variants"].astype(np.float64)
        io.save_tensors(path, tensors, {"manifest": self.manifest()})

    @classmethod
    def load(cls, path) -> "SyntheticDataset":
        tensors, meta = io.load_tensors(path)
        m = meta["manifest"]
        splits = {}
        for split in m["per_class"]:
            splits[split] = {
                "images": tensors[f"{split}/images"],
                "labels": tensors[f"{split}/labels"].astype(np.int64),
                "variants": tensors[f"{split}/variants"].astype(np.int64),
            }
        return cls(m["n_classes"], m["seed"], m["noise"], m["image_size"], m["per_class"], splits)


def make_synthetic_dataset(n_classes: int, per_class_train: int = 20, per_class_test: int = 30,
                           seed: int = 0, noise: float = 0.5, image_size: int = 32,
                           per_class_pretrain: int = 40) -> SyntheticDataset:
    """Build train/test/pretrain splits; each (split, class) draws from its own seed stream.

    The ``pretrain`` split feeds only the diffusion generator, standing in for
    the generator's external training data.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got n_classes={n_classes}")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")
    params = class_params(n_classes)
    counts = {"train": per_class_train, "test": per_class_test, "pretrain": per_class_pretrain}
    splits = {}
    for split, per in counts.items():
        imgs, labels, variants = [], [], []
        for c in range(n_classes):
            rng = stream(seed, "dataset", _SPLIT_IDS[split], c)
            for _ in range(per):
                v = int(rng.integers(N_VARIANTS))
                imgs.append(render(params[c], v, rng, noise, image_size))
                labels.append(c)
                variants.append(v)
        splits[split] = {
            "images": np.array(imgs).reshape(-1, 3, image_size, image_size),
            "labels": np.array(labels, dtype=np.int64),
            "variants": np.array(variants, dtype=np.int64),
        }
    return SyntheticDataset(n_classes, seed, noise, image_size, counts, splits)


@dataclass
class Episode:
    """N-way K-shot support set plus K generated (image, latent) pairs per class."""

    shots: int
    n_classes: int
    train_images: np.ndarray
    train_labels: np.ndarray
    generated_images: np.ndarray
    generated_labels: np.ndarray
    latents: np.ndarray
    generated_seeds: np.ndarray

    def __post_init__(self):
        if len(self.generated_images) != len(self.latents):
            raise EpisodeError("generated images and latents are not aligned")
        for name, labels in (("train", self.train_labels), ("generated", self.generated_labels)):
            if name == "generated" and len(labels) == 0:
                continue  # real-only episodes serve the plain finetune baseline
            counts = np.bincount(labels, minlength=self.n_classes)
            if np.any(counts != self.shots):
                raise EpisodeError(f"{name} collection is not {self.shots} per class: {counts.tolist()}")

    @property
    def shots_generated(self) -> int:
        return self.shots


def sample_episode(ds: SyntheticDataset, cache, shots: int, seed: int,
                   allow_any_shots: bool = False) -> Episode:
    """Draw K real and K cached generated samples per class, without replacement."""
    if shots < 1:
        raise EpisodeError(f"shots must be positive, got {shots}")
    if shots not in DEFAULT_SHOTS and not allow_any_shots:
        raise EpisodeError(f"shots={shots} not in {DEFAULT_SHOTS}; pass allow_any_shots=True")
    short = {c: len(cache.records(c)) for c in range(ds.n_classes) if len(cache.records(c)) < shots}
    if short:
        detail = ", ".join(f"class {c} has {n}" for c, n in sorted(short.items()))
        hint = getattr(cache, "count_hint", "")
        raise InsufficientCacheError(
            f"generation cache holds fewer than {shots} records per class ({detail}){hint}")

    labels = ds.labels("train")
    rng = stream(seed, "episode")
    tr_idx, gen = [], []
    for c in range(ds.n_classes):
        pool = np.flatnonzero(labels == c)
        if len(pool) < shots:
            raise EpisodeError(f"train split has only {len(pool)} images of class {c}")
        tr_idx.extend(np.sort(rng.choice(pool, size=shots, replace=False)).tolist())
        recs = cache.records(c)
        pick = np.sort(rng.choice(len(recs), size=shots, replace=False))
        gen.extend(recs[i] for i in pick)
    tr_idx = np.array(tr_idx)
    return Episode(
        shots=shots,
        n_classes=ds.n_classes,
        train_images=ds.images("train")[tr_idx],
        train_labels=labels[tr_idx],
        generated_images=np.stack([r.image for r in gen]),
        generated_labels=np.array([r.label for r in gen], dtype=np.int64),
        latents=np.stack([r.latent for r in gen]),
        generated_seeds=np.array([r.seed for r in gen], dtype=np.int64),
    )


AUGMENTATIONS = ("scale", "crop", "rotate", "color")


def augment(images: np.ndarray, policy, rng: np.random.Generator) -> np.ndarray:
    """Label-preserving random transforms of a [B,3,H,W] batch.

    ``policy`` is any subset of :data:`AUGMENTATIONS`; an empty policy returns
    the input unchanged.
    """
    policy = tuple(policy)
    unknown = set(policy) - set(AUGMENTATIONS)
    if unknown:
        raise ValueError(f"unknown augmentations {sorted(unknown)}")
    if not policy:
        return images
    out = np.array(images, dtype=np.float64, copy=True)
    B, C, H, W = out.shape
    center = np.array([(H - 1) / 2, (W - 1) / 2])
    for b in range(B):
        img = out[b]
        if "scale" in policy or "rotate" in policy:
            s = rng.uniform(0.9, 1.1) if "scale" in policy else 1.0
            a = np.deg2rad(rng.uniform(-15, 15)) if "rotate" in policy else 0.0
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]) / s
            offset = center - rot @ center
            img = np.stack([ndimage.affine_transform(ch, rot, offset, order=1, mode="nearest")
                            for ch in img])
        if "crop" in policy:
            pad = 4
            padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
            y, x = rng.integers(0, 2 * pad + 1, size=2)
            img = padded[:, y:y + H, x:x + W]
        if "color" in policy:
            gain = rng.uniform(0.9, 1.1, size=(C, 1, 1))
            img = img * gain + rng.uniform(-0.05, 0.05)
        out[b] = img
    return out
