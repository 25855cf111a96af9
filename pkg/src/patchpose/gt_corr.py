"""Ground-truth patch correspondences by depth reprojection.

Given two registered views with depth, every masked source patch center is
lifted to 3D through the source depth and intrinsics, carried across by the
relative pose, and projected into the target. If the projection lands in a
masked target patch, the nearest masked target patch center becomes the
ground-truth partner. These pairs build contrastive-loss fixtures and
validate the descriptor matcher.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .featuregrid import DEFAULT_GEOMETRY, PatchGeometry, patch_center, patch_centers
from .geometry import CameraIntrinsics, Pose6D
from .matching import Correspondence

DEPTH_MAGIC = b"GPDP"
DEPTH_VERSION = 1
_DEPTH_HEADER = struct.Struct("<4sHII")


@dataclass(frozen=True)
class DepthView:
    """One registered view: depth raster (mm, 0 = invalid), camera, patch mask."""

    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose6D
    mask: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise ValueError(f"depth raster must be 2D, got shape {depth.shape}")
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise ValueError("depth values must be finite and non-negative")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
            raise ValueError(f"patch mask must be square, got shape {mask.shape}")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "mask", mask)


def mask_from_depth(depth: np.ndarray, geom: PatchGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Patch mask marking cells whose center pixel carries valid depth."""
    depth = np.asarray(depth)
    side = geom.grid_side
    mask = np.zeros((side, side), dtype=bool)
    for row in range(side):
        for col in range(side):
            x, y = patch_center((row, col), geom)
            xi, yi = int(round(x)), int(round(y))
            if 0 <= yi < depth.shape[0] and 0 <= xi < depth.shape[1]:
                mask[row, col] = depth[yi, xi] > 0
    return mask


def _lift_center(view: DepthView, index: tuple[int, int], geom: PatchGeometry):
    """Camera-frame 3D point under a patch center, or None if depth invalid."""
    center = patch_center(index, geom)
    xi, yi = int(round(center[0])), int(round(center[1]))
    if not (0 <= yi < view.depth.shape[0] and 0 <= xi < view.depth.shape[1]):
        return None
    z = view.depth[yi, xi]
    if z <= 0:
        return None
    return view.intrinsics.backproject(center, float(z))


def reproject_correspondences(
    source: DepthView, target: DepthView, geom: PatchGeometry = DEFAULT_GEOMETRY
) -> list[Correspondence]:
    """Depth-based ground-truth correspondences from source to target.

    Masked source patches with invalid center depth are skipped; projections
    whose containing target patch is unmasked (or off the grid) are dropped;
    otherwise the nearest masked target center wins, ties going to the
    smallest row-major index. No valid depth at all yields an empty list.
    """
    side = geom.grid_side
    for name, view in (("source", source), ("target", target)):
        if view.mask.shape != (side, side):
            raise ValueError(
                f"{name} mask is {view.mask.shape}, geometry wants {(side, side)}"
            )
    r_rel = target.pose.rotation @ source.pose.rotation.T
    t_rel = target.pose.translation - r_rel @ source.pose.translation

    tgt_centers = patch_centers(geom).reshape(-1, 2)
    tgt_flat_mask = target.mask.reshape(-1)
    masked_centers = tgt_centers[tgt_flat_mask]
    masked_flat = np.nonzero(tgt_flat_mask)[0]

    out: list[Correspondence] = []
    if len(masked_centers) == 0:
        return out
    for row, col in np.argwhere(source.mask):
        p_cam = _lift_center(source, (int(row), int(col)), geom)
        if p_cam is None:
            continue
        p_tgt = r_rel @ p_cam + t_rel
        if p_tgt[2] <= 0:
            continue
        u, v = target.intrinsics.project(p_tgt)
        p_col = int(np.floor(u / geom.patch_size))
        p_row = int(np.floor(v / geom.patch_size))
        if not (0 <= p_row < side and 0 <= p_col < side):
            continue
        if not target.mask[p_row, p_col]:
            continue
        d2 = (masked_centers[:, 0] - u) ** 2 + (masked_centers[:, 1] - v) ** 2
        best = int(np.argmin(d2))  # first minimum = smallest row-major index
        star = divmod(int(masked_flat[best]), side)
        out.append(Correspondence((int(row), int(col)), star, 1.0))
    return out


def symmetrize(
    forward: list[Correspondence], backward: list[Correspondence]
) -> list[Correspondence]:
    """Union of both directions with duplicates removed.

    `backward` comes from running the reprojection with the roles swapped,
    so its pairs are flipped into forward orientation before merging.
    """
    merged = list(forward)
    seen = {(c.query_index, c.template_index) for c in forward}
    for c in backward:
        key = (c.template_index, c.query_index)
        if key not in seen:
            seen.add(key)
            merged.append(Correspondence(key[0], key[1], c.score))
    return merged


# --- GPDP serialization -----------------------------------------------------------


def write_depth(depth: np.ndarray, destination) -> None:
    """Serialize a depth raster (GPDP format: mm as little-endian f32)."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth raster must be 2D, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise ValueError("depth values must be finite and non-negative")
    h, w = depth.shape
    payload = _DEPTH_HEADER.pack(DEPTH_MAGIC, DEPTH_VERSION, h, w) + depth.astype(
        "<f4"
    ).tobytes()
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "wb") as fh:
            fh.write(payload)


def read_depth(source) -> np.ndarray:
    """Parse a GPDP depth raster from a path, file object, or bytes."""
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif hasattr(source, "read"):
        raw = source.read()
    else:
        with open(source, "rb") as fh:
            raw = fh.read()

    if len(raw) < _DEPTH_HEADER.size:
        raise FormatError(f"truncated header: got {len(raw)} bytes", offset=len(raw))
    magic, version, h, w = _DEPTH_HEADER.unpack_from(raw, 0)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DEPTH_MAGIC!r}", offset=0)
    if version != DEPTH_VERSION:
        raise FormatError(f"unsupported depth version {version}", offset=4)
    if h == 0 or w == 0:
        raise FormatError(f"degenerate raster {h}x{w}", offset=6)
    data_off = _DEPTH_HEADER.size
    need = data_off + 4 * h * w
    if len(raw) < need:
        raise FormatError(
            f"truncated raster: need {need} bytes, got {len(raw)}", offset=len(raw)
        )
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes", offset=need)
    depth = (
        np.frombuffer(raw, dtype="<f4", count=h * w, offset=data_off)
        .reshape(h, w)
        .astype(np.float64)
    )
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise FormatError("raster holds negative or non-finite depth", offset=data_off)
    return depth
