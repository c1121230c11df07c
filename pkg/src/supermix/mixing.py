"""Generalized mask mixing, mask normalization, target labels and the blind
MixUp / CutMix baselines.

Raw masks are stacked as ``(k, grid_h, grid_w)``; normalized masks as
``(k, H, W)`` and broadcast across the channels of ``(H, W, C)`` images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .numerics import sample_beta, upsample_bilinear


def sigmoid(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def normalize_grid(raw: np.ndarray) -> np.ndarray:
    """Sigmoid-quotient normalization at grid resolution: ``s(m_i) / sum_j s(m_j)``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] < 2:
        raise InvalidInputError(f"raw masks must be (k>=2, h, w), got {raw.shape}")
    # log s(m) = -softplus(-m); a softmax over these logs stays finite when
    # every sigmoid underflows
    log_s = -np.logaddexp(0.0, -raw)
    log_s = log_s - log_s.max(axis=0)
    e = np.exp(log_s)
    return e / e.sum(axis=0)


def normalize_masks(raw: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Convex full-resolution masks from unconstrained low-resolution ones.

    Normalization happens on the grid and the planes are then bilinearly
    upsampled; interpolation weights sum to one, so the pointwise sum stays 1.
    """
    return upsample_bilinear(normalize_grid(raw), out_w, out_h)


def stack_images(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] < 2:
        raise InvalidInputError(f"expected k>=2 images of shape (H, W, C), got {x.shape}")
    return x


def mix(images, masks) -> np.ndarray:
    """``x_hat(u, c) = sum_i x_i(u, c) * m_i(u)``."""
    x = stack_images(images)
    m = np.asarray(masks, dtype=np.float64)
    if m.shape != x.shape[:3]:
        raise InvalidInputError(f"masks {m.shape} do not match images {x.shape[:3]}")
    out = x[0] * m[0][..., None]
    for i in range(1, x.shape[0]):
        out = out + x[i] * m[i][..., None]
    return out


def target_soft_label(classes, weights, n_classes: int) -> np.ndarray:
    """``sum_i r_i * onehot(y_i)``; repeated classes accumulate their weight."""
    classes = np.asarray(classes, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if classes.shape != weights.shape:
        raise InvalidInputError("classes and weights differ in length")
    if classes.size and (classes.min() < 0 or classes.max() >= n_classes):
        raise InvalidInputError(f"class indices must lie in [0, {n_classes})")
    y = np.zeros(n_classes)
    np.add.at(y, classes, weights)
    return y


@dataclass(frozen=True)
class MixInput:
    """``k`` images to be mixed together with their teacher-predicted classes."""

    images: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        x = stack_images(self.images)
        c = np.asarray(self.classes, dtype=np.int64)
        if c.shape != (x.shape[0],):
            raise InvalidInputError(f"need one class per image, got {c.shape} for k={x.shape[0]}")
        object.__setattr__(self, "images", x)
        object.__setattr__(self, "classes", c)

    @property
    def k(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]


def _check_pair(x0, x1):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape or x0.ndim != 3:
        raise InvalidInputError(f"images must share one (H, W, C) shape, got {x0.shape} and {x1.shape}")
    return x0, x1


def mixup(x0, x1, alpha: float, rng: np.random.Generator, y0: int = 0, y1: int = 1,
          n_classes: int = 2, r: float | None = None):
    """Blend ``r * x0 + (1 - r) * x1`` with ``r ~ Beta(alpha, alpha)``.

    Returns ``(image, soft_label, r)``.  Pass ``r`` to skip the draw.
    """
    if not alpha > 0:
        raise InvalidInputError(f"alpha must be positive, got {alpha}")
    x0, x1 = _check_pair(x0, x1)
    if r is None:
        r = sample_beta(alpha, rng)
    image = x0 * r + x1 * (1.0 - r)
    return image, target_soft_label([y0, y1], [r, 1.0 - r], n_classes), float(r)


@dataclass(frozen=True)
class Box:
    """Half-open pixel rectangle ``[top, bottom) x [left, right)``."""

    top: int
    bottom: int
    left: int
    right: int

    @property
    def area(self) -> int:
        return max(0, self.bottom - self.top) * max(0, self.right - self.left)


def cutmix_box(height: int, width: int, r: float, rng: np.random.Generator) -> Box:
    """Box of area about ``(1 - r) * H * W`` centred uniformly, clipped to the image."""
    scale = np.sqrt(1.0 - r)
    bh, bw = int(round(height * scale)), int(round(width * scale))
    cy, cx = int(rng.integers(height)), int(rng.integers(width))
    top, bottom = np.clip([cy - bh // 2, cy - bh // 2 + bh], 0, height)
    left, right = np.clip([cx - bw // 2, cx - bw // 2 + bw], 0, width)
    return Box(int(top), int(bottom), int(left), int(right))


def box_masks(box: Box, height: int, width: int) -> np.ndarray:
    """Binary ``(2, H, W)`` masks: plane 1 is the box, plane 0 its complement."""
    inside = np.zeros((height, width))
    inside[box.top:box.bottom, box.left:box.right] = 1.0
    return np.stack([1.0 - inside, inside])


def cutmix(x0, x1, alpha: float, rng: np.random.Generator, y0: int = 0, y1: int = 1,
           n_classes: int = 2, r: float | None = None, box: Box | None = None):
    """Paste a rectangle of ``x1`` onto ``x0``.

    The label weight of ``y1`` is the clipped box's exact pixel fraction.
    Returns ``(image, soft_label, r)`` where ``r`` is the area fraction kept
    from ``x0``.
    """
    if not alpha > 0:
        raise InvalidInputError(f"alpha must be positive, got {alpha}")
    x0, x1 = _check_pair(x0, x1)
    h, w = x0.shape[:2]
    if box is None:
        if r is None:
            r = sample_beta(alpha, rng)
        box = cutmix_box(h, w, r, rng)
    image = x0.copy()
    image[box.top:box.bottom, box.left:box.right] = x1[box.top:box.bottom, box.left:box.right]
    frac = box.area / (h * w)
    return image, target_soft_label([y0, y1], [1.0 - frac, frac], n_classes), 1.0 - frac
