"""Pixel buffers, optical-density math, tiling and image file I/O.

Images are numpy arrays of shape (H, W, 3), dtype uint8.  All corruption
blending happens in optical density (OD) space where stain contributions
add linearly (Beer-Lambert); intensities are only quantized back to 8 bit
at the very end of a pipeline.  The white reference is I0 = 255 and zero
intensities are clamped to 1 before the log, so the OD range for 8-bit
input is [0, -log10(1/255)].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

WHITE_REFERENCE = 255.0

# TIFF inputs produce TIFF outputs (slide-level data), everything else PNG.
TIFF_SUFFIXES = {".tif", ".tiff"}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"} | TIFF_SUFFIXES


def validate_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    return arr


def rgb_to_od(image, i0: float = WHITE_REFERENCE) -> np.ndarray:
    """Per-channel optical density: OD = -log10(max(I, 1) / I0)."""
    if i0 <= 0:
        raise ValueError("reference intensity must be positive")
    arr = np.asarray(image, dtype=np.float32)
    arr = np.maximum(arr, 1.0)
    return -np.log10(arr / np.float32(i0))


def od_to_rgb(od, i0: float = WHITE_REFERENCE) -> np.ndarray:
    """Inverse OD transform: I = round(I0 * 10**(-OD)), clamped to [0, 255]."""
    intensity = np.float32(i0) * np.power(10.0, -np.asarray(od, dtype=np.float32))
    return np.clip(np.rint(intensity), 0, 255).astype(np.uint8)


def od_blend_sum(base, overlay, alpha) -> np.ndarray:
    """Elementwise OD_base + alpha * OD_overlay.

    ``alpha`` is a per-pixel weight in [0, 1], broadcastable against the
    maps; mismatched map dimensions indicate a caller bug.
    """
    base = np.asarray(base, dtype=np.float32)
    overlay = np.asarray(overlay, dtype=np.float32)
    if base.shape != overlay.shape:
        raise ValueError(
            f"OD map dimensions differ: {base.shape} vs {overlay.shape}"
        )
    alpha = np.asarray(alpha, dtype=np.float32)
    if alpha.ndim == 2 and base.ndim == 3:
        alpha = alpha[:, :, None]
    return base + alpha * overlay


@dataclass(frozen=True)
class TileGrid:
    """Exact partition of an image into tiles (ragged at the far edges)."""

    tile_size: int
    image_width: int
    image_height: int
    tiles: tuple[tuple[int, int, int, int], ...]  # (x, y, w, h)


def split_tiles(width: int, height: int, tile_size: int) -> TileGrid:
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    tiles = []
    for y in range(0, height, tile_size):
        h = min(tile_size, height - y)
        for x in range(0, width, tile_size):
            w = min(tile_size, width - x)
            tiles.append((x, y, w, h))
    return TileGrid(tile_size, width, height, tuple(tiles))


def extract_tile(image, tile) -> np.ndarray:
    x, y, w, h = tile
    return np.asarray(image)[y : y + h, x : x + w]


def stitch_tiles(grid: TileGrid, tiles) -> np.ndarray:
    """Reassemble tile arrays (in grid order) into one image."""
    first = np.asarray(tiles[0])
    shape = (grid.image_height, grid.image_width) + first.shape[2:]
    out = np.empty(shape, dtype=first.dtype)
    for (x, y, w, h), tile in zip(grid.tiles, tiles, strict=True):
        out[y : y + h, x : x + w] = tile
    return out


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_image(path, image) -> None:
    arr = validate_image(image)
    if arr.dtype != np.uint8:
        raise ValueError("only 8-bit images are written")
    Image.fromarray(arr, mode="RGB").save(path)
