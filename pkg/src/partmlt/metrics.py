"""Image-error metrics for the ablation harness."""

from __future__ import annotations

import numpy as np

from .core import ImageBuffer

__all__ = ["structured_noise", "tile_variances"]


def tile_variances(img: ImageBuffer, ref: ImageBuffer, tile: int = 16) -> np.ndarray:
    """Per-tile variance of the luminance residual against a reference."""
    res = img.luminance_image() - ref.luminance_image()
    h, w = res.shape
    th, tw = h // tile, w // tile
    res = res[: th * tile, : tw * tile]
    tiles = res.reshape(th, tile, tw, tile).swapaxes(1, 2).reshape(th * tw, -1)
    return tiles.var(axis=1)


def structured_noise(img: ImageBuffer, ref: ImageBuffer, tile: int = 16) -> float:
    """Tile-wise variance of variances, normalized by the squared mean tile
    variance. Blotchy error (quiet tiles next to wild ones, the footprint of
    an under-sized proposal set) scores high; uniformly distributed noise
    scores low regardless of its overall level."""
    v = tile_variances(img, ref, tile)
    m = float(v.mean())
    if m <= 0:
        return 0.0
    return float(v.var() / (m * m))
