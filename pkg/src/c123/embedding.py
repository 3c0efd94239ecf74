"""Deterministic embedding models used offline in place of CLIP."""

from __future__ import annotations

import numpy as np
from PIL import Image

GRID = 8


def _normalize(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        # an all-black raster has no direction; pick a fixed one
        return np.full(v.size, 1.0 / np.sqrt(v.size))
    return v / norm


def downsample_features(raster, grid=GRID):
    """Grayscale ``grid x grid`` box-downsample of an H x W x 3 raster, flattened."""
    raster = np.asarray(raster, dtype=np.float64)
    gray = raster @ np.array([0.299, 0.587, 0.114]) if raster.ndim == 3 else raster
    h, w = gray.shape
    if h % grid == 0 and w % grid == 0:
        small = gray.reshape(grid, h // grid, grid, w // grid).mean(axis=(1, 3))
    else:
        img = Image.fromarray(gray.astype(np.float32), mode="F")
        small = np.asarray(img.resize((grid, grid), Image.Resampling.BOX), dtype=np.float64)
    return small.ravel()


class DownsampleEmbedding:
    """Images embed as their normalized 8x8 grayscale thumbnail.

    Any text embeds as the thumbnail of ``target`` (for example the
    reference image), so text similarity measures closeness to that raster.
    """

    dimension = GRID * GRID

    def __init__(self, target=None):
        self.target = None if target is None else np.asarray(target, dtype=np.float64)

    def embed_image(self, raster):
        return _normalize(downsample_features(raster))

    def embed_text(self, text):
        if self.target is None:
            raise ValueError("DownsampleEmbedding needs a target raster to embed text")
        return self.embed_image(self.target)


class TraceEmbedding:
    """Plays back a scripted similarity trace.

    Each ``embed_text`` call starts a new detection ``k = 1, 2, ...``; images
    embed so that their cosine with the text vector is ``trace(k)``.
    """

    dimension = 2

    def __init__(self, trace):
        self.trace = trace
        self.k = 0

    def embed_text(self, text):
        self.k += 1
        return np.array([1.0, 0.0])

    def embed_image(self, raster):
        s = float(self.trace(self.k))
        return np.array([s, np.sqrt(max(0.0, 1.0 - s * s))])

