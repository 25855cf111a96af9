"""Crop geometry shared with the pose engine.

The convention (documented in the engine's interface): a square crop centered
on the bbox center with side max(width, height) * (1 + pad_ratio), scaled
isotropically so the crop fills the processed image. The transform maps
original-image pixel coordinates to processed pixels and never rotates, so
it is fully described by (scale, tx, ty) with x' = scale * x + tx.
"""

from dataclasses import dataclass

import numpy as np

IMAGE_SIDE = 224
GRID_SIDE = 16
PATCH_SIZE = 14


@dataclass(frozen=True)
class CropParams:
    """Similarity map from original pixels to the processed crop."""

    scale: float
    tx: float
    ty: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts + np.array([self.tx, self.ty])

    def invert(self) -> "CropParams":
        inv = 1.0 / self.scale
        return CropParams(inv, -self.tx * inv, -self.ty * inv)


def crop_params(
    bbox: tuple[float, float, float, float],
    pad_ratio: float = 0.0,
    image_side: int = IMAGE_SIDE,
) -> CropParams:
    """Crop transform for a detection bbox, same arithmetic as the engine."""
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"empty bbox {bbox}")
    if pad_ratio < 0:
        raise ValueError(f"pad_ratio must be >= 0, got {pad_ratio}")
    side = max(x1 - x0, y1 - y0) * (1.0 + pad_ratio)
    s = image_side / side
    center = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
    target = np.array([image_side / 2.0, image_side / 2.0])
    t = target - s * center
    return CropParams(float(s), float(t[0]), float(t[1]))


def _source_coords(params: CropParams, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Original-image sample coordinates for every output pixel."""
    inv = params.invert()
    xs = inv.scale * np.arange(side, dtype=np.float64) + inv.tx
    ys = inv.scale * np.arange(side, dtype=np.float64) + inv.ty
    return xs, ys


def resample_bilinear(
    image: np.ndarray, params: CropParams, side: int = IMAGE_SIDE
) -> np.ndarray:
    """Sample the crop from an original image, bilinear, zero outside.

    Accepts (H, W) or (H, W, C) float input; pixel (row i, col j) sits at
    coordinate (x=j, y=i), so the identity transform reproduces the image
    exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ValueError(f"image must be (H, W) or (H, W, C), got shape {image.shape}")
    h, w = image.shape[:2]
    xs, ys = _source_coords(params, side)
    gx, gy = np.meshgrid(xs, ys)

    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    fx = gx - x0
    fy = gy - y0
    valid = (gx >= 0) & (gx <= w - 1) & (gy >= 0) & (gy <= h - 1)

    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)

    fx = fx[:, :, None]
    fy = fy[:, :, None]
    out = (
        image[y0c, x0c] * (1 - fx) * (1 - fy)
        + image[y0c, x1c] * fx * (1 - fy)
        + image[y1c, x0c] * (1 - fx) * fy
        + image[y1c, x1c] * fx * fy
    )
    out[~valid] = 0.0
    return out[:, :, 0] if squeeze else out


def resample_mask(mask: np.ndarray, params: CropParams, side: int = IMAGE_SIDE) -> np.ndarray:
    """Nearest-neighbor crop of a boolean mask, False outside the image."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    h, w = mask.shape
    xs, ys = _source_coords(params, side)
    gx, gy = np.meshgrid(xs, ys)
    xi = np.round(gx).astype(int)
    yi = np.round(gy).astype(int)
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros((side, side), dtype=bool)
    out[valid] = mask[yi[valid], xi[valid]]
    return out


def patch_mask(cropped_mask: np.ndarray, grid_side: int = GRID_SIDE,
               patch_size: int = PATCH_SIZE) -> np.ndarray:
    """Patch-level object mask: a patch is on the object if any pixel is."""
    cropped_mask = np.asarray(cropped_mask, dtype=bool)
    want = (grid_side * patch_size, grid_side * patch_size)
    if cropped_mask.shape != want:
        raise ValueError(f"cropped mask is {cropped_mask.shape}, expected {want}")
    blocks = cropped_mask.reshape(grid_side, patch_size, grid_side, patch_size)
    return blocks.any(axis=(1, 3))
