"""Patch feature grids, crop transforms, and the GPFG binary format.

A feature grid holds one D-dimensional descriptor per 14x14 image patch of a
processed 224x224 crop, plus a boolean mask marking patches on the object.
Masked descriptors are stored pre-normalized so downstream cosine scoring
reduces to dot products.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .geometry import Affine2

GRID_MAGIC = b"GPFG"
GRID_VERSION = 1

NORM_TOL = 1e-5


@dataclass(frozen=True)
class PatchGeometry:
    """Patch/grid/image sizes, all in pixels."""

    patch_size: int = 14
    grid_side: int = 16
    image_side: int = 224

    def __post_init__(self):
        if self.patch_size * self.grid_side != self.image_side:
            raise ValueError(
                f"patch_size * grid_side must equal image_side, got "
                f"{self.patch_size} * {self.grid_side} != {self.image_side}"
            )


DEFAULT_GEOMETRY = PatchGeometry()


def patch_center(index: tuple[int, int], geom: PatchGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Processed-image pixel center (x, y) of the patch at (row, col)."""
    row, col = index
    if not (0 <= row < geom.grid_side and 0 <= col < geom.grid_side):
        raise ValueError(f"patch index {index} outside {geom.grid_side}x{geom.grid_side} grid")
    half = geom.patch_size / 2.0
    return np.array([geom.patch_size * col + half, geom.patch_size * row + half])


def patch_centers(geom: PatchGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """(grid_side, grid_side, 2) array of all patch centers, row-major."""
    half = geom.patch_size / 2.0
    ticks = geom.patch_size * np.arange(geom.grid_side) + half
    xs, ys = np.meshgrid(ticks, ticks)  # ys varies along rows
    return np.stack([xs, ys], axis=-1)


class FeatureGrid:
    """Immutable H x W grid of L2-normalized descriptors with an object mask.

    Unmasked cells are all-zero. `variant` marks grids whose descriptors
    co-vary with in-plane rotation and scale (the second feature family used
    by the relative-transform regressor), as opposed to viewpoint-invariant
    retrieval features.
    """

    def __init__(self, data: np.ndarray, mask: np.ndarray, variant: bool = False):
        data = np.ascontiguousarray(data, dtype=np.float32)
        mask = np.ascontiguousarray(mask, dtype=bool)
        if data.ndim != 3:
            raise ValueError(f"data must be (H, W, D), got shape {data.shape}")
        if mask.shape != data.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match grid {data.shape[:2]}")
        norms = np.linalg.norm(data[mask], axis=-1)
        if norms.size and not np.all(np.abs(norms - 1.0) <= NORM_TOL):
            worst = float(np.nanmax(np.abs(norms - 1.0))) if not np.isnan(norms).any() else float("nan")
            raise ValueError(f"masked descriptors must be unit-norm within {NORM_TOL}, worst deviation {worst}")
        if np.any(data[~mask]):
            raise ValueError("unmasked cells must be all-zero")
        data.flags.writeable = False
        mask.flags.writeable = False
        self.data = data
        self.mask = mask
        self.variant = bool(variant)

    @classmethod
    def from_raw(cls, data: np.ndarray, mask: np.ndarray, variant: bool = False) -> "FeatureGrid":
        """Build a grid from unnormalized descriptors.

        Masked cells are L2-normalized (in float64, then cast to float32);
        unmasked cells are zeroed. Masked cells must be nonzero.
        """
        data = np.asarray(data, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if data.ndim != 3 or mask.shape != data.shape[:2]:
            raise ValueError(f"expected (H, W, D) data with (H, W) mask, got {data.shape} / {mask.shape}")
        norms = np.linalg.norm(data, axis=-1, keepdims=True)
        if np.any(norms[mask] == 0.0):
            raise ValueError("masked cells must have nonzero descriptors")
        out = np.zeros_like(data)
        np.divide(data, norms, out=out, where=norms > 0)
        out[~mask] = 0.0
        return cls(out.astype(np.float32), mask, variant)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def masked_indices(self) -> np.ndarray:
        """(N, 2) array of masked (row, col) indices in row-major order."""
        if not hasattr(self, "_masked_indices"):
            self._masked_indices = np.argwhere(self.mask)
        return self._masked_indices

    @property
    def masked_matrix(self) -> np.ndarray:
        """(N, D) float32 matrix of masked descriptors in row-major order."""
        if not hasattr(self, "_masked_matrix"):
            self._masked_matrix = self.data[self.mask]
        return self._masked_matrix

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return (
            self.variant == other.variant
            and self.data.shape == other.data.shape
            and np.array_equal(self.mask, other.mask)
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self) -> str:
        kind = "variant" if self.variant else "invariant"
        return (
            f"FeatureGrid({self.height}x{self.width}x{self.dim}, "
            f"{int(self.mask.sum())} masked, {kind})"
        )


@dataclass(frozen=True)
class CropTransform:
    """Similarity transform from original-image pixels to the 224 crop."""

    affine: Affine2

    def __post_init__(self):
        if self.affine.alpha != 0.0:
            raise ValueError(f"crop transforms never rotate, got alpha {self.affine.alpha}")


def crop_transform(
    bbox: tuple[float, float, float, float],
    pad_ratio: float = 0.0,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
) -> CropTransform:
    """Square crop around a bbox, isotropically rescaled to the processed size.

    The crop is centered on the bbox center with side max(width, height)
    scaled up by (1 + pad_ratio), so the bbox center always lands on the
    processed-image center.
    """
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"empty bbox {bbox}")
    if pad_ratio < 0:
        raise ValueError(f"pad_ratio must be >= 0, got {pad_ratio}")
    side = max(x1 - x0, y1 - y0) * (1.0 + pad_ratio)
    s = geom.image_side / side
    center = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
    target = np.array([geom.image_side / 2.0, geom.image_side / 2.0])
    return CropTransform(Affine2(s, 0.0, target - s * center))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two descriptors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# --- GPFG serialization -------------------------------------------------------

_HEADER = struct.Struct("<4sHHHII")  # magic, version, H, W, D, flags

_FLAG_VARIANT = 0x1
_KNOWN_FLAGS = _FLAG_VARIANT


def write_grid(grid: FeatureGrid, destination) -> None:
    """Serialize a grid to a path or binary file object (GPFG format)."""
    flags = _FLAG_VARIANT if grid.variant else 0
    header = _HEADER.pack(
        GRID_MAGIC, GRID_VERSION, grid.height, grid.width, grid.dim, flags
    )
    mask_bytes = grid.mask.astype(np.uint8).tobytes()
    data_bytes = grid.data.astype("<f4", copy=False).tobytes()
    payload = header + mask_bytes + data_bytes
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "wb") as fh:
            fh.write(payload)


def grid_to_bytes(grid: FeatureGrid) -> bytes:
    buf = io.BytesIO()
    write_grid(grid, buf)
    return buf.getvalue()


def read_grid(source) -> FeatureGrid:
    """Parse a GPFG grid from a path, binary file object, or bytes."""
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif hasattr(source, "read"):
        raw = source.read()
    else:
        with open(source, "rb") as fh:
            raw = fh.read()
    return grid_from_bytes(raw)


def grid_from_bytes(raw: bytes) -> FeatureGrid:
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"truncated header: need {_HEADER.size} bytes, got {len(raw)}", offset=len(raw)
        )
    magic, version, h, w, d, flags = _HEADER.unpack_from(raw, 0)
    if magic != GRID_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GRID_MAGIC!r}", offset=0)
    if version != GRID_VERSION:
        raise FormatError(f"unsupported grid version {version}", offset=4)
    if flags & ~_KNOWN_FLAGS:
        raise FormatError(f"unknown flag bits 0x{flags & ~_KNOWN_FLAGS:x}", offset=14)
    if h == 0 or w == 0 or d == 0:
        raise FormatError(f"degenerate grid dimensions {h}x{w}x{d}", offset=6)
    mask_off = _HEADER.size
    data_off = mask_off + h * w
    end = data_off + h * w * d * 4
    if len(raw) < end:
        raise FormatError(
            f"truncated grid: need {end} bytes, got {len(raw)}", offset=len(raw)
        )
    if len(raw) > end:
        raise FormatError(f"{len(raw) - end} trailing bytes after grid data", offset=end)
    mask_raw = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=mask_off)
    bad = np.nonzero(mask_raw > 1)[0]
    if bad.size:
        raise FormatError(
            f"mask byte must be 0 or 1, got {mask_raw[bad[0]]}", offset=mask_off + int(bad[0])
        )
    mask = mask_raw.astype(bool).reshape(h, w)
    data = (
        np.frombuffer(raw, dtype="<f4", count=h * w * d, offset=data_off)
        .astype(np.float32)
        .reshape(h, w, d)
    )
    try:
        return FeatureGrid(data, mask, variant=bool(flags & _FLAG_VARIANT))
    except ValueError as exc:
        raise FormatError(f"invalid grid payload: {exc}", offset=data_off) from exc
