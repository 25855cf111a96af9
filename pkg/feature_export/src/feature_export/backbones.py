"""Patch descriptor backbones.

Each backbone turns a 224x224 processed crop into a 16x16 grid of
descriptors, one per 14x14 patch. The reference backbones here are seeded
random projections of raw patch content: deterministic, dependency-free
stand-ins with the same output contract (shape, dtype, normalization) as a
learned feature extractor, which makes them suitable for format and
integration testing. Swap in real embeddings by registering a callable with
the same signature.
"""

from collections.abc import Callable

import numpy as np

from .crop import GRID_SIDE, IMAGE_SIDE, PATCH_SIZE

Backbone = Callable[[np.ndarray], np.ndarray]

_PROJECTION_SEED = 7310


def _as_chw_patches(crop: np.ndarray) -> np.ndarray:
    """(224, 224[, C]) crop -> (16, 16, 14*14*C) patch rows."""
    crop = np.asarray(crop, dtype=np.float64)
    if crop.ndim == 2:
        crop = crop[:, :, None]
    if crop.shape[:2] != (IMAGE_SIDE, IMAGE_SIDE):
        raise ValueError(
            f"crop must be {IMAGE_SIDE}x{IMAGE_SIDE}, got {crop.shape[:2]}"
        )
    c = crop.shape[2]
    patches = crop.reshape(GRID_SIDE, PATCH_SIZE, GRID_SIDE, PATCH_SIZE, c)
    patches = patches.transpose(0, 2, 1, 3, 4)
    return patches.reshape(GRID_SIDE, GRID_SIDE, PATCH_SIZE * PATCH_SIZE * c)


def _projection(in_dim: int, out_dim: int) -> np.ndarray:
    """Fixed Gaussian projection; keyed by dimensions so runs agree."""
    rng = np.random.default_rng([_PROJECTION_SEED, in_dim, out_dim])
    return rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)


def random_projection_backbone(out_dim: int) -> Backbone:
    """Backbone projecting each raw patch (plus a bias term) to out_dim."""

    def extract(crop: np.ndarray) -> np.ndarray:
        patches = _as_chw_patches(crop)
        flat = patches.reshape(-1, patches.shape[2])
        flat = np.concatenate([flat, np.ones((flat.shape[0], 1))], axis=1)
        proj = _projection(flat.shape[1], out_dim)
        feats = flat @ proj
        return feats.reshape(GRID_SIDE, GRID_SIDE, out_dim).astype(np.float32)

    return extract


# tag -> (backbone, descriptor dim, variant flag). The invariant stream is
# the retrieval descriptor; the variant stream feeds scale/in-plane
# regression and is marked with the format's variant flag.
BACKBONES: dict[str, tuple[Backbone, int, bool]] = {
    "rand-proj-1024": (random_projection_backbone(1024), 1024, False),
    "rand-proj-256": (random_projection_backbone(256), 256, True),
}

DEFAULT_BACKBONES = ("rand-proj-1024", "rand-proj-256")


def get_backbone(tag: str) -> tuple[Backbone, int, bool]:
    try:
        return BACKBONES[tag]
    except KeyError:
        known = ", ".join(sorted(BACKBONES))
        raise ValueError(f"unknown backbone {tag!r} (known: {known})") from None
