"""View generation for contrastive training on ``[l, d]`` windows.

All functions are pure in ``(x, rng)`` and return arrays shaped like ``x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("noise", "zero_mask", "time_warp", "crop_resize")


@dataclass(frozen=True)
class AugmentSpec:
    kind: str = "crop_resize"
    sigma: float = 0.1
    mask_fraction: float = 0.25
    warp_knots: int = 4
    warp_strength: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}; choose from {KINDS}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ValueError("mask_fraction must lie in [0, 1)")
        if self.warp_knots < 1 or self.warp_strength <= 0:
            raise ValueError("time warp needs knots >= 1 and strength > 0")


def random_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return x.copy()
    return x + rng.normal(0.0, sigma, size=x.shape)


def zero_masking(x: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    length = x.shape[0]
    span = int(np.floor(fraction * length + 0.5))
    out = x.copy()
    if span == 0:
        return out
    start = int(rng.integers(0, length - span + 1))
    out[start : start + span] = 0.0
    return out


def resample(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Linear interpolation of every channel of ``x`` at fractional row ``positions``."""
    length = x.shape[0]
    if length == 1:
        return np.repeat(x, len(positions), axis=0)
    pos = np.clip(positions, 0.0, length - 1.0)
    lo = np.minimum(np.floor(pos).astype(np.intp), length - 2)
    frac = (pos - lo)[:, None]
    return x[lo] * (1.0 - frac) + x[lo + 1] * frac


def warp_map(length: int, knots: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Strictly increasing source positions with endpoints pinned to 0 and ``length - 1``.

    Local speed is ``exp(strength * s(t))`` where ``s`` interpolates standard
    normal draws at ``knots + 2`` evenly spaced anchors.
    """
    anchors = np.linspace(0.0, length - 1.0, knots + 2)
    draws = rng.normal(size=knots + 2)
    speed = np.exp(strength * np.interp(np.arange(length, dtype=float), anchors, draws))
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]))])
    return cum / cum[-1] * (length - 1.0)


def time_warp(x: np.ndarray, knots: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    return resample(x, warp_map(x.shape[0], knots, strength, rng))


def crop_and_resize(x: np.ndarray, rng: np.random.Generator, start: int | None = None) -> np.ndarray:
    """Crop a contiguous half of the window (shared by all channels) and stretch it back to full length."""
    length = x.shape[0]
    crop = length // 2
    if start is None:
        start = int(rng.integers(0, length - crop + 1))
    positions = start + np.linspace(0.0, crop - 1.0, length)
    return resample(x, positions)


def augment(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "noise":
        return random_noise(x, spec.sigma, rng)
    if spec.kind == "zero_mask":
        return zero_masking(x, spec.mask_fraction, rng)
    if spec.kind == "time_warp":
        return time_warp(x, spec.warp_knots, spec.warp_strength, rng)
    return crop_and_resize(x, rng)


def augment_batch(X: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Augment each window of ``X`` (``[B, l, d]``) with its own draw."""
    return np.stack([augment(x, spec, rng) for x in X]) if len(X) else X.copy()


def two_views(X: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two views from the same family with independent draws."""
    rng_a, rng_b = rng.spawn(2)
    return augment_batch(X, spec, rng_a), augment_batch(X, spec, rng_b)
