"""Weak (shift + optional mirror) and strong (weak + cutout) image augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentPolicy:
    shift_fraction: float = 0.125
    mirror_x: bool = False
    cutout_fraction: float = 0.5
    pad_fill: float = 0.0

    def __post_init__(self):
        if not 0 <= self.shift_fraction <= 0.25:
            raise ValueError(f"shift_fraction must lie in [0, 0.25], got {self.shift_fraction}")
        if not 0 < self.cutout_fraction <= 1:
            raise ValueError(f"cutout_fraction must lie in (0, 1], got {self.cutout_fraction}")

    @property
    def fill(self) -> float:
        return float(np.clip(self.pad_fill, 0.0, 1.0))


DIGITS_POLICY = AugmentPolicy(mirror_x=False)
NATURAL_POLICY = AugmentPolicy(mirror_x=True)


@dataclass
class AugmentedPair:
    weak: np.ndarray
    strong: np.ndarray


def translate(images: np.ndarray, shifts: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Move each image by integer (dy, dx) pixels, filling exposed pixels with ``fill``."""
    n, h, w, _ = images.shape
    m = int(np.abs(shifts).max()) if len(shifts) else 0
    if m == 0:
        return images.copy()
    padded = np.pad(images, ((0, 0), (m, m), (m, m), (0, 0)), constant_values=fill)
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(shifts):
        out[i] = padded[i, m - dy:m - dy + h, m - dx:m - dx + w]
    return out


def mirror(images: np.ndarray, which: np.ndarray) -> np.ndarray:
    """Left-right flip of the images selected by the boolean mask ``which``."""
    out = images.copy()
    out[which] = out[which, :, ::-1]
    return out


def cutout_boxes(n: int, side: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 4) array of clipped [y0, y1, x0, x1) squares with uniformly random centers."""
    centers = rng.integers(0, side, size=(n, 2))
    lo = centers - size // 2
    y0, x0 = np.clip(lo[:, 0], 0, side), np.clip(lo[:, 1], 0, side)
    y1, x1 = np.clip(lo[:, 0] + size, 0, side), np.clip(lo[:, 1] + size, 0, side)
    return np.stack([y0, y1, x0, x1], axis=1)


def weak_augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    n, h, _, _ = batch.shape
    s = int(np.floor(policy.shift_fraction * h))
    shifts = rng.integers(-s, s + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = translate(batch, shifts, policy.fill)
    if policy.mirror_x:
        out = mirror(out, flips)
    return out


def strong_augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator,
                   boxes_out=None) -> np.ndarray:
    """Weak augmentation followed by one cutout square per image.

    The weak part consumes ``rng`` first, so a generator replayed from the
    same state gives the weak image exactly outside the cutout square.
    """
    out = weak_augment(batch, policy, rng)
    side = batch.shape[1]
    size = max(1, int(np.floor(policy.cutout_fraction * side)))
    boxes = cutout_boxes(len(out), side, size, rng)
    for i, (y0, y1, x0, x1) in enumerate(boxes):
        out[i, y0:y1, x0:x1, :] = policy.fill
    if boxes_out is not None:
        boxes_out.append(boxes)
    return out


def augment_pair(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> AugmentedPair:
    """Weak and strong views of ``batch`` from two independent child streams."""
    rng_weak, rng_strong = rng.spawn(2)
    return AugmentedPair(weak_augment(batch, policy, rng_weak),
                         strong_augment(batch, policy, rng_strong))
