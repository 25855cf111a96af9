"""Command-line interface.

One command: read a job file describing images, masks, and detections,
then export masked feature grids plus a manifest to an output directory.

Job file schema (JSON):

    {
      "pad_ratio": 0.0,
      "backbones": ["rand-proj-1024", "rand-proj-256"],
      "images": [
        {
          "id": "scene0_det0",
          "image": "scene0.npy",
          "mask": "scene0_mask.npy",
          "bbox": [x0, y0, x1, y1],
          "intrinsics": [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]
        }
      ]
    }

Image and mask paths are resolved relative to the job file. Paths ending
in .npy load with numpy; anything else loads through Pillow.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .backbones import DEFAULT_BACKBONES
from .export import ImageItem, export_grids
from .formats import GridFormatError


def _load_array(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    try:
        from PIL import Image
    except ImportError:
        raise ValueError(
            f"{path}: loading non-.npy images requires Pillow"
        ) from None
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64)


def _load_items(job_path: Path, job: dict) -> list[ImageItem]:
    base = job_path.parent
    items = []
    for entry in job["images"]:
        image = _load_array(base / entry["image"])
        mask_name = entry.get("mask")
        mask = _load_array(base / mask_name) > 0 if mask_name else None
        items.append(ImageItem(
            image_id=str(entry["id"]),
            image=image,
            mask=mask,
            bbox=tuple(float(v) for v in entry["bbox"]),
            intrinsics=np.asarray(entry["intrinsics"], dtype=np.float64),
        ))
    return items


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feature-export",
        description="Export masked patch feature grids for pose estimation.",
    )
    parser.add_argument("job", type=Path, help="job file (JSON)")
    parser.add_argument("-o", "--out-dir", type=Path, required=True,
                        help="directory for grid files and manifest.json")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log per-item progress")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
    )
    try:
        job = json.loads(args.job.read_text())
        items = _load_items(args.job, job)
        backbones = tuple(job.get("backbones", DEFAULT_BACKBONES))
        results = export_grids(
            items,
            args.out_dir,
            backbones=backbones,
            pad_ratio=float(job.get("pad_ratio", 0.0)),
        )
    except (GridFormatError, OSError, ValueError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"feature-export: error: {exc}", file=sys.stderr)
        return 1
    written = sum(len(r.files) for r in results)
    print(f"exported {written} grids for {len(results)} of {len(items)} items "
          f"to {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
