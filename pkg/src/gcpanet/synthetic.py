"""Synthetic image/mask pairs for desk-scale training and tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def make_pair(rng: np.random.Generator, size: int = 64):
    """One RGB image with an elliptical or rectangular object and its binary mask."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    ry, rx = rng.uniform(0.15, 0.3, size=2) * size
    if rng.random() < 0.5:
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)

    bg = rng.uniform(0, 255, size=3)
    fg = rng.uniform(0, 255, size=3)
    while np.abs(fg - bg).sum() < 200:
        fg = rng.uniform(0, 255, size=3)
    img = np.where(mask[..., None], fg, bg) + rng.normal(0, 12, size=(h, w, 3))
    img = np.clip(img, 0, 255).astype(np.uint8)
    return img, (mask * 255).astype(np.uint8)


def make_dataset(root, name: str = "synthetic", n: int = 8, size: int = 64, seed: int = 0) -> Path:
    """Write ``n`` pairs to ``root/name/{images,masks}``; returns the dataset directory."""
    base = Path(root) / name
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        img, mask = make_pair(rng, size)
        Image.fromarray(img).save(base / "images" / f"{i:04d}.png")
        Image.fromarray(mask).save(base / "masks" / f"{i:04d}.png")
    return base
