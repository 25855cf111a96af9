"""Export pipeline: images + detections -> feature grid files + manifest.

For each detection the pipeline crops the image around the bbox using the
shared crop convention, zeroes background pixels in the processed crop,
runs the requested backbones, masks and normalizes the descriptors, and
writes one grid file per backbone. A manifest records the crop transform
and intrinsics so a downstream consumer can recover full pose.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbones import DEFAULT_BACKBONES, get_backbone
from .crop import CropParams, crop_params, patch_mask, resample_bilinear, resample_mask
from .formats import normalize_descriptors, write_grid

logger = logging.getLogger("feature_export")


@dataclass
class ImageItem:
    """One detection to export: the image, its object mask, and the bbox."""

    image_id: str
    image: np.ndarray
    mask: np.ndarray | None
    bbox: tuple[float, float, float, float]
    intrinsics: np.ndarray

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        if self.intrinsics.shape != (3, 3):
            raise ValueError(
                f"{self.image_id}: intrinsics must be 3x3, "
                f"got {self.intrinsics.shape}"
            )


@dataclass
class ExportResult:
    """Files written for one item, plus the crop used to produce them."""

    image_id: str
    crop: CropParams
    files: dict[str, Path] = field(default_factory=dict)


def process_item(item: ImageItem, pad_ratio: float) -> tuple[np.ndarray, np.ndarray, CropParams] | None:
    """Crop, background-zero, and patch-mask one item.

    Returns (processed crop, 16x16 patch mask, crop params), or None when
    the item cannot be exported (missing mask, object fully outside the
    crop). Shape mismatches are programming errors and raise.
    """
    if item.mask is None:
        logger.warning("%s: no object mask, skipping", item.image_id)
        return None
    if item.mask.shape != item.image.shape[:2]:
        raise ValueError(
            f"{item.image_id}: mask shape {item.mask.shape} does not match "
            f"image {item.image.shape[:2]}"
        )
    params = crop_params(item.bbox, pad_ratio)
    crop = resample_bilinear(item.image, params)
    cropped_mask = resample_mask(item.mask, params)
    crop[~cropped_mask] = 0.0
    patches = patch_mask(cropped_mask)
    if not patches.any():
        logger.warning("%s: object mask is empty inside the crop, skipping",
                       item.image_id)
        return None
    return crop, patches, params


def export_grids(
    items: list[ImageItem],
    out_dir: str | Path,
    backbones: tuple[str, ...] = DEFAULT_BACKBONES,
    pad_ratio: float = 0.0,
) -> list[ExportResult]:
    """Run the full export and write grid files plus manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extractors = {tag: get_backbone(tag) for tag in backbones}

    results = []
    manifest_grids = []
    for item in items:
        processed = process_item(item, pad_ratio)
        if processed is None:
            continue
        crop, patches, params = processed
        result = ExportResult(item.image_id, params)
        for tag, (extract, dim, variant) in extractors.items():
            feats = extract(crop)
            if feats.shape != (patches.shape[0], patches.shape[1], dim):
                raise ValueError(
                    f"backbone {tag!r} returned {feats.shape}, "
                    f"expected {(*patches.shape, dim)}"
                )
            grid = normalize_descriptors(feats, patches)
            path = out_dir / f"{item.image_id}_{tag}.gpfg"
            write_grid(grid, patches, variant, path)
            result.files[tag] = path
            manifest_grids.append({
                "image_id": item.image_id,
                "bbox": [float(v) for v in item.bbox],
                "crop": {"scale": params.scale, "tx": params.tx, "ty": params.ty},
                "intrinsics": item.intrinsics.tolist(),
                "backbone": tag,
                "variant": variant,
                "file": path.name,
            })
        results.append(result)

    manifest = {"pad_ratio": pad_ratio, "grids": manifest_grids}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d grids for %d items to %s",
                len(manifest_grids), len(results), out_dir)
    return results
