"""PCA false-color rendering of feature maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from psearch.backbone import FeatureMap
from psearch.errors import ArgumentError


def _as_array(f) -> np.ndarray:
    data = f.data if isinstance(f, FeatureMap) else f
    if hasattr(data, "detach"):
        data = data.detach().cpu().numpy()
    return np.asarray(data, dtype=np.float64)


def pca_project(pixels: np.ndarray, k: int = 3):
    """Top-``k`` principal components of ``pixels [N, C]`` via SVD.

    Returns ``(scores [N, k], components [k, C], mean [C])``.  Each component
    is signed so its largest-magnitude loading is positive.
    """
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k].copy()
    for row in comps:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1
    return centered @ comps.T, comps, mean


def _minmax(x, eps=1e-9):
    lo, hi = x.min(), x.max()
    if hi - lo <= eps * max(1.0, abs(hi), abs(lo)):
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def visualize_pca(features, path, scale: int = 1):
    """Project per-pixel channel vectors onto the top-3 components, min-max
    scale each to [0, 255] and write an RGB PNG.  A list of maps shares one
    PCA basis and is tiled left to right at the largest map's size."""
    maps = [_as_array(f) for f in (features if isinstance(features, (list, tuple)) else [features])]
    if not maps:
        raise ArgumentError("no feature maps given")
    for m in maps:
        if m.ndim != 3 or m.shape[0] < 3:
            raise ArgumentError(f"need [C, H, W] with at least 3 channels, got {m.shape}")
    if len({m.shape[0] for m in maps}) != 1:
        raise ArgumentError("maps must share the channel count")
    pixels = np.concatenate([m.reshape(m.shape[0], -1).T for m in maps])
    scores, _, _ = pca_project(pixels, 3)
    rgb = np.stack([_minmax(scores[:, i]) for i in range(3)], axis=1)
    target_h = max(m.shape[1] for m in maps)
    tiles, start = [], 0
    for m in maps:
        _, h, w = m.shape
        tile = rgb[start:start + h * w].reshape(h, w, 3)
        start += h * w
        rep = max(1, target_h // h)
        tile = np.repeat(np.repeat(tile, rep, axis=0), rep, axis=1)
        if tile.shape[0] < target_h:
            tile = np.pad(tile, ((0, target_h - tile.shape[0]), (0, 0), (0, 0)))
        tiles.append(tile)
    img = (np.concatenate(tiles, axis=1) * 255).round().astype(np.uint8)
    if scale > 1:
        img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, "RGB").save(path, format="PNG")
    return img
