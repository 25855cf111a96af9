"""Analytic synthetic feature provider for oracle testing.

Models the object as a unit sphere rendered orthographically into the
processed 224x224 crop. Each patch whose center ray hits the sphere gets a
descriptor that is a smooth seeded function of (a) the object-frame surface
direction at the hit point and (b) the hit point's distance from the
silhouette rim; patches off the sphere are unmasked.

Both quantities are preserved exactly when the crop is rotated in-plane,
rescaled, or translated, so two such renders produce identical descriptors
at corresponding locations. That is the invariance the retrieval features
are trained for, which makes this provider a ground-truth oracle for
matching and estimation. The rim component does shift with the viewpoint,
which is what gives nearby viewpoints distinguishable grids.

A second family ("variant" grids) deliberately co-varies with the crop's
in-plane rotation and scale: two extra channel pairs encode a per-patch
orientation angle that shifts by the relative in-plane rotation and a
bounded log-scale angle, so a small regressor can recover (s, alpha) from
concatenated descriptor pairs.
"""

from __future__ import annotations

import numpy as np

from .featuregrid import DEFAULT_GEOMETRY, FeatureGrid, PatchGeometry, patch_centers
from .geometry import CameraIntrinsics, Pose6D

BASE_RADIUS_PX = 70.0
BUMP_SHARPNESS = 8.0
RIM_SIGMA = 0.15
MAX_RIM_CHANNELS = 6

ANGLE_CHANNEL_GAIN = 1.0
SCALE_CHANNEL_OMEGA = 0.5
SCALE_FIELD_AMPLITUDE = 0.25
MIN_VARIANT_DIM = 8


def _unit_rows(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _hit_normals(
    points: np.ndarray,
    rotation: np.ndarray,
    geom: PatchGeometry,
    scale: float,
    offset: tuple[float, float],
) -> tuple[np.ndarray, np.ndarray]:
    """Object-frame surface directions hit by rays through pixel points.

    Returns (normals (N,3), valid (N,)). Orthographic camera: the pixel
    offset from the sphere's projected center, divided by the projected
    radius, gives the camera-frame surface normal's x/y components directly.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rotation = np.asarray(rotation, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    center = geom.image_side / 2.0
    radius = BASE_RADIUS_PX * scale
    u = (pts[:, 0] - center - offset[0]) / radius
    v = (pts[:, 1] - center - offset[1]) / radius
    rho2 = u * u + v * v
    valid = rho2 < 1.0
    w = np.sqrt(np.clip(1.0 - rho2, 0.0, None))
    # visible hemisphere faces the camera, so the normal's z is negative
    n_cam = np.stack([u, v, -w], axis=1)
    n_obj = n_cam @ rotation  # row-vector form of R^T @ n
    return n_obj, valid


def _bump_descriptors(n_obj: np.ndarray, seed_key: list, dim: int) -> np.ndarray:
    """Smooth seeded embedding of surface directions, rows L2-normalized."""
    rng = np.random.default_rng(seed_key)
    bumps = _unit_rows(rng, dim)
    raw = np.exp(BUMP_SHARPNESS * (n_obj @ bumps.T - 1.0))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _rim_profile(w: np.ndarray, channels: int) -> np.ndarray:
    """Gaussian ring activations over the rim distance w in [0, 1].

    w is the magnitude of the camera-frame normal's z component: 0 on the
    silhouette rim, 1 at the closest surface point. It is preserved by
    in-plane rotation, scale, and translation of the crop but shifts with
    the viewpoint, which is what lets retrieval separate nearby views.
    """
    centers = np.linspace(0.0, 1.0, channels)
    return np.exp(-((w[:, None] - centers[None]) ** 2) / (2.0 * RIM_SIGMA**2))


def synth_descriptors_at(
    points: np.ndarray,
    rotation: np.ndarray,
    object_seed: int,
    dim: int,
    *,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
    scale: float = 1.0,
    offset: tuple[float, float] = (0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the invariant descriptor field at arbitrary pixel points.

    Returns (descriptors (N, dim), valid (N,)); rows where valid is False
    are zero. Used by remapping oracles that probe between patch centers.
    """
    if dim < 8:
        raise ValueError(f"descriptor dim must be >= 8, got {dim}")
    n_obj, valid = _hit_normals(points, rotation, geom, scale, offset)
    out = np.zeros((len(n_obj), dim))
    if valid.any():
        n = n_obj[valid]
        rim_channels = min(MAX_RIM_CHANNELS, dim // 4)
        bumps = _bump_descriptors(n, [int(object_seed), 0], dim - rim_channels)
        rim = _rim_profile(-n @ rotation[2], rim_channels)
        packed = np.concatenate([bumps, rim], axis=1)
        out[valid] = packed / np.linalg.norm(packed, axis=1, keepdims=True)
    return out, valid


def synth_features(
    rotation: np.ndarray,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
    object_seed: int = 0,
    dim: int = 32,
    *,
    scale: float = 1.0,
    offset: tuple[float, float] = (0.0, 0.0),
) -> FeatureGrid:
    """Viewpoint-sensitive, crop-invariant feature grid for one render.

    `rotation` is the full object-to-camera rotation of the render (for a
    template, the viewpoint rotation; for a query, the viewpoint composed
    with its in-plane rotation). `scale` and `offset` place the sphere in
    the crop and do not influence descriptor values, only which patches
    sample which surface directions.
    """
    pts = patch_centers(geom).reshape(-1, 2)
    desc, valid = synth_descriptors_at(
        pts, rotation, object_seed, dim, geom=geom, scale=scale, offset=offset
    )
    side = geom.grid_side
    data = desc.reshape(side, side, dim)
    mask = valid.reshape(side, side)
    return FeatureGrid(data.astype(np.float32), mask)


def synth_variant_descriptors_at(
    points: np.ndarray,
    rotation: np.ndarray,
    object_seed: int,
    dim: int,
    *,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
    scale: float = 1.0,
    offset: tuple[float, float] = (0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the scale/in-plane co-variant descriptor field.

    Layout: dim-4 smooth surface channels, then (cos, sin) of a per-patch
    orientation angle that shifts by exactly the relative in-plane rotation
    between two renders of the same surface point, then (cos, sin) of
    omega * (ln scale + rho(surface direction)) which shifts by
    omega * ln(relative scale). All rows have equal pre-normalization norm,
    so L2 normalization rescales channels by one global constant.
    """
    if dim < MIN_VARIANT_DIM:
        raise ValueError(f"variant descriptor dim must be >= {MIN_VARIANT_DIM}, got {dim}")
    rotation = np.asarray(rotation, dtype=float)
    n_obj, valid = _hit_normals(points, rotation, geom, scale, offset)
    out = np.zeros((len(n_obj), dim))
    if not valid.any():
        return out, valid
    n = n_obj[valid]
    rng = np.random.default_rng([int(object_seed), 1])
    u0 = _unit_rows(rng, 1)[0]  # orientation reference field
    w0 = _unit_rows(rng, 1)[0]  # scale modulation field

    base = _bump_descriptors(n, [int(object_seed), 2], dim - 4)

    # tangent reference vector projected into the image plane; its image
    # orientation rotates by exactly the in-plane angle between renders
    tangent = u0 - (n @ u0)[:, None] * n
    img = tangent @ rotation.T  # camera-frame components, rows = points
    norm_xy = np.hypot(img[:, 0], img[:, 1])
    theta = np.where(norm_xy > 1e-12, np.arctan2(img[:, 1], img[:, 0]), 0.0)

    xi = SCALE_CHANNEL_OMEGA * (np.log(scale) + SCALE_FIELD_AMPLITUDE * (n @ w0))

    packed = np.concatenate(
        [
            base,
            ANGLE_CHANNEL_GAIN * np.cos(theta)[:, None],
            ANGLE_CHANNEL_GAIN * np.sin(theta)[:, None],
            ANGLE_CHANNEL_GAIN * np.cos(xi)[:, None],
            ANGLE_CHANNEL_GAIN * np.sin(xi)[:, None],
        ],
        axis=1,
    )
    out[valid] = packed / np.linalg.norm(packed, axis=1, keepdims=True)
    return out, valid


def synth_variant_features(
    rotation: np.ndarray,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
    object_seed: int = 0,
    dim: int = 16,
    *,
    scale: float = 1.0,
    offset: tuple[float, float] = (0.0, 0.0),
) -> FeatureGrid:
    """Variant-feature grid (flags the variant bit) for one render."""
    pts = patch_centers(geom).reshape(-1, 2)
    desc, valid = synth_variant_descriptors_at(
        pts, rotation, object_seed, dim, geom=geom, scale=scale, offset=offset
    )
    side = geom.grid_side
    return FeatureGrid(
        desc.reshape(side, side, dim).astype(np.float32),
        valid.reshape(side, side),
        variant=True,
    )


def sphere_depth(
    pose: Pose6D, k: CameraIntrinsics, radius_mm: float, shape: tuple[int, int]
) -> np.ndarray:
    """Perspective depth render (mm) of a sphere; 0 marks pixels that miss.

    The sphere is centered on the pose translation. Depth is the camera-z
    of the nearest ray-sphere intersection, matching a real depth sensor.
    """
    if radius_mm <= 0:
        raise ValueError(f"radius must be positive, got {radius_mm}")
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    rays = np.stack(
        [(xs + 0.0 - k.cx) / k.fx, (ys + 0.0 - k.cy) / k.fy, np.ones((h, w))], axis=-1
    )
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    c = pose.translation
    proj = rays @ c
    disc = proj * proj - (c @ c - radius_mm * radius_mm)
    hit = disc > 0
    lam = proj - np.sqrt(np.where(hit, disc, 0.0))
    depth = np.where(hit & (lam > 0), lam * rays[..., 2], 0.0)
    return depth
