"""Masked patch feature-grid export for template-based pose estimation.

Produces the binary grid files and crop metadata a pose engine consumes:
square padded crops around detections, per-patch object masks, and
unit-normalized descriptors from pluggable backbones.
"""

from .backbones import BACKBONES, DEFAULT_BACKBONES, get_backbone
from .crop import (
    CropParams,
    crop_params,
    patch_mask,
    resample_bilinear,
    resample_mask,
)
from .export import ExportResult, ImageItem, export_grids, process_item
from .formats import (
    FLAG_VARIANT,
    GridFormatError,
    grid_to_bytes,
    normalize_descriptors,
    read_grid,
    write_grid,
)

__version__ = "0.1.0"

__all__ = [
    "BACKBONES",
    "DEFAULT_BACKBONES",
    "CropParams",
    "ExportResult",
    "FLAG_VARIANT",
    "GridFormatError",
    "ImageItem",
    "crop_params",
    "export_grids",
    "get_backbone",
    "grid_to_bytes",
    "normalize_descriptors",
    "patch_mask",
    "process_item",
    "read_grid",
    "resample_bilinear",
    "resample_mask",
    "write_grid",
    "__version__",
]
