"""PNG panels of mixes and masks, and the smoothness-profile plot."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo


def to_uint8(img) -> np.ndarray:
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    a = np.rint(a * 255.0).astype(np.uint8)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    return a


def _tile(a: np.ndarray, scale: int) -> np.ndarray:
    a = np.repeat(np.repeat(a, scale, axis=0), scale, axis=1)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    elif a.shape[2] != 3:
        a = np.resize(a, a.shape[:2] + (3,)) if a.shape[2] < 3 else a[..., :3]
    return a


def mix_panel(inputs, masks, mixed, scale: int = 4, gap: int = 2) -> np.ndarray:
    """One row: the inputs, then each mask plane in gray, then the mixed image."""
    tiles = [to_uint8(x) for x in inputs]
    if masks is not None:
        tiles += [to_uint8(m) for m in masks]
    tiles.append(to_uint8(mixed))
    tiles = [_tile(t, scale) for t in tiles]
    h = tiles[0].shape[0]
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    parts = []
    for t in tiles:
        parts += [t, sep]
    return np.concatenate(parts[:-1], axis=1)


def save_png(path, pixels: np.ndarray, config_json: str | None = None) -> None:
    info = PngInfo()
    if config_json is not None:
        info.add_text("config", config_json)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, pnginfo=info)


def read_png_config(path) -> str | None:
    with Image.open(path) as im:
        return im.text.get("config")


def plot_profiles(path, profiles: dict, config_json: str | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, prof in profiles.items():
        ax.plot(np.arange(1, len(prof) + 1), prof, marker="o", label=name)
    ax.set_xlabel("rank")
    ax.set_ylabel("mean probability")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Description": config_json or ""})
    plt.close(fig)
