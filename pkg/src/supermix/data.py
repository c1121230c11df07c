"""Dataset containers and the synthetic shapes dataset used at desk scale."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .numerics import gaussian_kernel, gaussian_smooth

SHAPES = ("disk", "square", "triangle", "plus", "ring", "hbars", "diamond", "xcross", "vbars", "frame")


@dataclass
class LabeledDataset:
    """Images ``(N, H, W, C)`` float32 in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InvalidInputError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.images.shape[0] != self.labels.size:
            raise InvalidInputError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return int(self.labels.size)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.n_classes, self.split, dict(self.meta))


@dataclass
class MixedDataset:
    """Mixed images with teacher pseudo-labels and per-sample optimizer stats."""

    images: np.ndarray
    pseudo_classes: np.ndarray
    n_classes: int
    method: str
    kappa: float
    soft_labels: np.ndarray | None = None
    iterations: np.ndarray | None = None
    converged: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.pseudo_classes = np.asarray(self.pseudo_classes, dtype=np.int64)
        n = self.pseudo_classes.size
        if self.images.shape[0] != n:
            raise InvalidInputError("images and pseudo labels differ in length")
        if self.soft_labels is not None:
            self.soft_labels = np.asarray(self.soft_labels, dtype=np.float32)
            if self.soft_labels.shape != (n, self.n_classes):
                raise InvalidInputError(f"soft labels must be ({n}, {self.n_classes})")
        if self.iterations is None:
            self.iterations = np.zeros(n, dtype=np.int64)
        if self.converged is None:
            self.converged = np.ones(n, dtype=bool)
        self.iterations = np.asarray(self.iterations, dtype=np.int64)
        self.converged = np.asarray(self.converged, dtype=bool)

    def __len__(self):
        return int(self.pseudo_classes.size)

    @property
    def labels(self) -> np.ndarray:
        return self.pseudo_classes

    def subset(self, idx) -> "MixedDataset":
        soft = None if self.soft_labels is None else self.soft_labels[idx]
        return MixedDataset(self.images[idx], self.pseudo_classes[idx], self.n_classes, self.method,
                            self.kappa, soft, self.iterations[idx], self.converged[idx], dict(self.meta))


@dataclass
class SynthSpec:
    """Recipe for the colored-shapes dataset.

    Class ``c`` draws shape ``SHAPES[c % 10]`` tinted around hue ``c / n_classes``;
    ``hue_jitter`` widens the tint so color alone does not identify the class.
    """

    n_classes: int = 4
    height: int = 32
    width: int = 32
    channels: int = 3
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    hue_jitter: float = 0.5
    min_size: float = 0.35
    max_size: float = 0.6
    noise: float = 0.12


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = (yy - cy) / r, (xx - cx) / r
    t = 0.3
    if kind == "disk":
        return dx ** 2 + dy ** 2 <= 1.0
    if kind == "square":
        return (np.abs(dx) <= 0.85) & (np.abs(dy) <= 0.85)
    if kind == "triangle":
        return (dy <= 0.9) & (dy >= -0.9) & (np.abs(dx) <= (dy + 0.9) * 0.55)
    if kind == "plus":
        return ((np.abs(dx) <= t) & (np.abs(dy) <= 1.0)) | ((np.abs(dy) <= t) & (np.abs(dx) <= 1.0))
    if kind == "ring":
        d = dx ** 2 + dy ** 2
        return (d <= 1.0) & (d >= 0.45)
    if kind == "hbars":
        inside = (np.abs(dx) <= 0.95) & (np.abs(dy) <= 0.95)
        return inside & (np.floor((dy + 1.0) * 2.5) % 2 == 0)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.0
    if kind == "xcross":
        return ((np.abs(dx - dy) <= t * 1.2) | (np.abs(dx + dy) <= t * 1.2)) & (np.abs(dx) <= 0.9) & (np.abs(dy) <= 0.9)
    if kind == "vbars":
        inside = (np.abs(dx) <= 0.95) & (np.abs(dy) <= 0.95)
        return inside & (np.floor((dx + 1.0) * 2.5) % 2 == 0)
    if kind == "frame":
        return (np.maximum(np.abs(dx), np.abs(dy)) <= 0.9) & (np.maximum(np.abs(dx), np.abs(dy)) >= 0.55)
    raise InvalidInputError(f"unknown shape {kind!r}")


def _render(spec: SynthSpec, label: int, rng: np.random.Generator, texture_kernel) -> np.ndarray:
    h, w, c = spec.height, spec.width, spec.channels
    # textured background: low-frequency color noise plus fine grain
    base = rng.uniform(0.15, 0.6, size=c)
    coarse = gaussian_smooth(rng.normal(0.0, 1.0, size=(c, h, w)), texture_kernel)
    coarse /= max(np.abs(coarse).max(), 1e-12)
    img = base[:, None, None] + 0.2 * coarse
    img = img.transpose(1, 2, 0)
    size = rng.uniform(spec.min_size, spec.max_size) * min(h, w) / 2.0
    cy = rng.uniform(size, h - size)
    cx = rng.uniform(size, w - size)
    mask = _shape_mask(SHAPES[label % len(SHAPES)], h, w, cy, cx, size)
    hue = (label / spec.n_classes + rng.uniform(-spec.hue_jitter, spec.hue_jitter) / spec.n_classes) % 1.0
    rgb = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0)))
    color = np.resize(rgb, c)
    img = np.where(mask[..., None], color[None, None, :], img)
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _draw(spec: SynthSpec, n: int, rng: np.random.Generator, split: str) -> LabeledDataset:
    kernel = gaussian_kernel(2.0)
    labels = np.arange(n) % spec.n_classes
    rng.shuffle(labels)
    images = np.empty((n, spec.height, spec.width, spec.channels), dtype=np.float32)
    for i, y in enumerate(labels):
        images[i] = _render(spec, int(y), rng, kernel)
    return LabeledDataset(images, labels, spec.n_classes, split, {"synth": spec.__dict__.copy()})


def synth_dataset(spec: SynthSpec, rng: np.random.Generator | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Generate balanced ``(train, test)`` splits; deterministic in ``spec.seed``.

    Train and test come from independent child streams, so no draw is shared.
    """
    if spec.n_classes < 2:
        raise InvalidInputError(f"need at least two classes, got {spec.n_classes}")
    if spec.height < 8 or spec.width < 8 or spec.channels < 1:
        raise InvalidInputError("images must be at least 8x8 with one channel")
    if spec.n_train < 1 or spec.n_test < 0:
        raise InvalidInputError("sample counts must be positive")
    seq = np.random.SeedSequence(spec.seed) if rng is None else np.random.SeedSequence(
        int(rng.integers(2 ** 63)))
    train_seq, test_seq = seq.spawn(2)
    train = _draw(spec, spec.n_train, np.random.default_rng(train_seq), "train")
    test = _draw(spec, spec.n_test, np.random.default_rng(test_seq), "test")
    return train, test
