"""Viewpoint sampling, rotation/affine algebra, and 6D pose recovery.

Conventions used throughout:
  - rotations are row-major 3x3 world-to-camera (object-to-camera) matrices,
  - camera frame is x right, y down, +z forward,
  - 2D similarity transforms act on pixel coordinates (x right, y down),
  - in-plane angles live in (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCorrespondenceError, DegenerateTransformError

POLE_DOT_LIMIT = 0.999


def normalize_angle(alpha: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.atan2(math.sin(alpha), math.cos(alpha))
    if a <= -math.pi:  # atan2 returns -pi for sin == -0.0
        a = math.pi
    return a


def rotation_z(alpha: float) -> np.ndarray:
    """3x3 rotation about the camera optical axis."""
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def require_rotation(r: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Validate that `r` is a proper rotation matrix within `tol`."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r @ r.T, np.eye(3), atol=tol):
        raise ValueError("matrix is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("matrix determinant is not +1")
    return r


@dataclass(frozen=True)
class Affine2:
    """2D similarity transform (scale, in-plane rotation, translation).

    Matrix form:

        [ s*cos(a)  -s*sin(a)  tx ]
        [ s*sin(a)   s*cos(a)  ty ]
        [    0          0       1 ]
    """

    scale: float
    alpha: float
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if not (self.scale > 0.0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "alpha", normalize_angle(self.alpha))
        t = np.asarray(self.translation, dtype=float).reshape(2)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Affine2":
        return cls(1.0, 0.0, np.zeros(2))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Affine2":
        """Decompose a 3x3 similarity matrix; scale = norm of first column."""
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"expected 3x3 matrix, got {m.shape}")
        s = math.hypot(m[0, 0], m[1, 0])
        if not (s > 0.0 and math.isfinite(s)):
            raise DegenerateTransformError(f"non-positive similarity scale {s}")
        alpha = math.atan2(m[1, 0], m[0, 0])
        return cls(s, alpha, m[:2, 2].copy())

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.alpha), math.sin(self.alpha)
        return np.array(
            [
                [self.scale * c, -self.scale * s, self.translation[0]],
                [self.scale * s, self.scale * c, self.translation[1]],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def rotation2(self) -> np.ndarray:
        c, s = math.cos(self.alpha), math.sin(self.alpha)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (2,) point or an (N, 2) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ (self.scale * self.rotation2).T + self.translation

    def inverse(self) -> "Affine2":
        inv_rot = self.rotation2.T / self.scale
        return Affine2(1.0 / self.scale, -self.alpha, -inv_rot @ self.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project camera-frame 3D point(s) with positive depth to pixels."""
        p = np.asarray(points, dtype=float)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        z = p[:, 2]
        out = np.stack(
            [self.fx * p[:, 0] / z + self.cx, self.fy * p[:, 1] / z + self.cy], axis=1
        )
        return out[0] if single else out

    def backproject(self, pixel: np.ndarray, depth: float) -> np.ndarray:
        """Lift a pixel at the given depth (mm) into the camera frame."""
        x, y = float(pixel[0]), float(pixel[1])
        return depth * np.array([(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0])


@dataclass(frozen=True)
class Pose6D:
    """Rigid pose in the camera frame: x_cam = R @ x_obj + t, t in mm."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=float).reshape(3)
        )

    def transform(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class ViewpointSet:
    """Unit viewing directions paired with their look-at rotations."""

    directions: np.ndarray  # (N, 3) unit vectors
    rotations: np.ndarray  # (N, 3, 3)

    def __len__(self) -> int:
        return len(self.directions)

    def __iter__(self):
        return zip(self.directions, self.rotations)


# --- icosphere ---------------------------------------------------------------

_PHI = (1.0 + math.sqrt(5.0)) / 2.0

_ICO_VERTS = [
    (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
    (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
    (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
]

_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def icosphere_viewpoints(subdivisions: int) -> ViewpointSet:
    """Sample out-of-plane viewpoints on a subdivided icosahedron.

    Each triangle is split into four at every level; shared edge midpoints are
    deduplicated exactly via an edge cache, so the vertex count is
    10 * 4**n + 2. Vertices are canonicalized (sorted lexicographically after
    rounding to 1e-9) to make template ordering deterministic.
    """
    if not isinstance(subdivisions, int) or not (0 <= subdivisions <= 4):
        raise ValueError(f"subdivisions must be an integer in [0, 4], got {subdivisions}")

    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = list(_ICO_FACES)

    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in midpoint_cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint_cache[key] = len(verts) - 1
            return midpoint_cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    directions = np.array(verts)
    order = np.lexsort(np.round(directions, 9).T[::-1])  # by x, then y, then z
    directions = directions[order]
    rotations = np.stack([viewpoint_to_rotation(d) for d in directions])
    return ViewpointSet(directions, rotations)


def viewpoint_to_rotation(direction: np.ndarray) -> np.ndarray:
    """Look-at rotation for a camera at `direction` pointing at the origin.

    Returns world-to-camera R whose rows are the camera axes; the camera
    z-axis equals -direction. Up-vector is world +z, falling back to world
    +x near the poles.
    """
    d = np.asarray(direction, dtype=float).reshape(3)
    n = np.linalg.norm(d)
    if n == 0.0:
        raise ValueError("direction must be a nonzero vector")
    if abs(n - 1.0) > 1e-9:
        raise ValueError(f"direction must be unit length, got norm {n}")
    z_cam = -d
    up = np.array([1.0, 0.0, 0.0]) if abs(d[2]) > POLE_DOT_LIMIT else np.array([0.0, 0.0, 1.0])
    x_cam = np.cross(up, z_cam)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(z_cam, x_cam)
    return np.stack([x_cam, y_cam, z_cam])


# --- composition and pose recovery -------------------------------------------


def compose_rotation(alpha: float, r_ae: np.ndarray) -> np.ndarray:
    """Full rotation from in-plane angle and out-of-plane rotation: Rz(a) @ r_ae."""
    return rotation_z(alpha) @ np.asarray(r_ae, dtype=float)


def compose_template_to_query(m_t: Affine2, m_tq: Affine2, m_q: Affine2) -> Affine2:
    """Original-image transform: crop(T) * processed-space map * crop(Q)^-1."""
    return Affine2.from_matrix(m_t.matrix @ m_tq.matrix @ np.linalg.inv(m_q.matrix))


def recover_translation_z(
    tz_template: float, m_tq_full: Affine2, f_t: float, f_q: float
) -> float:
    """Depth of the query object from the template depth and the scale ratio."""
    if not tz_template > 0:
        raise ValueError(f"template depth must be positive, got {tz_template}")
    if not (f_t > 0 and f_q > 0):
        raise ValueError("focal lengths must be positive")
    s = m_tq_full.scale
    if not (s > 0 and math.isfinite(s)):
        raise DegenerateTransformError(f"non-positive transform scale {s}")
    return tz_template * (1.0 / s) * (f_q / f_t)


def recover_pose(
    r_ae: np.ndarray,
    alpha: float,
    m_tq_full: Affine2,
    template_center: np.ndarray,
    tz_template: float,
    k_t: CameraIntrinsics,
    k_q: CameraIntrinsics,
) -> Pose6D:
    """Full 6D pose from a template viewpoint and the original-image transform.

    `m_tq_full` maps original template pixels to original query pixels;
    `template_center` is where the object origin projects in the template.
    """
    rotation = compose_rotation(alpha, r_ae)
    center_q = m_tq_full.apply(np.asarray(template_center, dtype=float))
    tz = recover_translation_z(tz_template, m_tq_full, k_t.fx, k_q.fx)
    translation = tz * np.array(
        [(center_q[0] - k_q.cx) / k_q.fx, (center_q[1] - k_q.cy) / k_q.fy, 1.0]
    )
    return Pose6D(rotation, translation)


def pose_to_template_affine(
    pose: Pose6D,
    r_ae: np.ndarray,
    template_center: np.ndarray,
    tz_template: float,
    k_t: CameraIntrinsics,
    k_q: CameraIntrinsics,
    tol: float = 1e-6,
) -> tuple[float, Affine2]:
    """Express a pose as (alpha, original-image transform) w.r.t. a template.

    Exact inverse of recover_pose when the pose shares the template's
    out-of-plane rotation; used to build ground truth for synthetic scenes.
    """
    r_rel = pose.rotation @ np.asarray(r_ae, dtype=float).T
    if abs(r_rel[2, 2] - 1.0) > tol:
        raise ValueError("pose does not share the template's out-of-plane rotation")
    alpha = math.atan2(r_rel[1, 0], r_rel[0, 0])
    tz = float(pose.translation[2])
    if tz <= 0:
        raise ValueError("pose depth must be positive")
    s = (tz_template / tz) * (k_q.fx / k_t.fx)
    center_q = k_q.project(pose.translation)
    rot = Affine2(s, alpha).rotation2 * s
    t = center_q - rot @ np.asarray(template_center, dtype=float)
    return alpha, Affine2(s, alpha, t)


def kabsch2d(
    p_t1: np.ndarray, p_t2: np.ndarray, p_q1: np.ndarray, p_q2: np.ndarray
) -> Affine2:
    """Similarity transform mapping two template points onto two query points.

    Scale is the length ratio of the difference vectors, the angle comes from
    atan2 of their cross and dot products, and the translation is averaged
    over both points. Exact on consistent inputs.
    """
    p_t1 = np.asarray(p_t1, dtype=float)
    p_t2 = np.asarray(p_t2, dtype=float)
    p_q1 = np.asarray(p_q1, dtype=float)
    p_q2 = np.asarray(p_q2, dtype=float)
    d_t = p_t2 - p_t1
    d_q = p_q2 - p_q1
    norm_t = np.linalg.norm(d_t)
    norm_q = np.linalg.norm(d_q)
    if norm_t == 0.0 or norm_q == 0.0:
        raise DegenerateCorrespondenceError("coincident points in a correspondence pair")
    s = norm_q / norm_t
    alpha = math.atan2(d_t[0] * d_q[1] - d_t[1] * d_q[0], d_t @ d_q)
    rot = rotation_z(alpha)[:2, :2] * s
    t = 0.5 * ((p_q1 - rot @ p_t1) + (p_q2 - rot @ p_t2))
    return Affine2(s, alpha, t)
