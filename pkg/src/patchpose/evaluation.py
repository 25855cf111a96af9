"""Pose-error metrics and the segmentation-robustness harness.

MSSD and MSPD score a predicted pose against ground truth over a model point
set, taking the best alignment across the model's discrete symmetry set. AR
aggregates recall over a threshold sweep. The robustness harness buckets
detections by how badly their predicted segmentation mask overlaps the
ground-truth mask and reports AR per bucket as CSV.

The AR reported here averages MSSD and MSPD recalls only (no depth renderer,
so no VSD term); it is labeled AR(MSSD,MSPD) to avoid confusion with scores
that include all three metrics.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidModelError
from .geometry import CameraIntrinsics, Pose6D

# BOP-style threshold sweeps: MSSD thresholds as fractions of the object
# diameter, MSPD thresholds as multiples of r = image-diagonal / 640
DEFAULT_MSSD_FACTORS = tuple(np.linspace(0.05, 0.50, 10))
DEFAULT_MSPD_FACTORS = tuple(np.linspace(5.0, 50.0, 10))
DEFAULT_IOU_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

ROBUSTNESS_CSV_HEADER = "iou_threshold,n_records,ar_mssd,ar_mspd,ar_mean"

_ROTATION_TOL = 1e-9


def _check_rotation(r: np.ndarray, what: str) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise InvalidModelError(f"{what} must be 3x3, got {r.shape}")
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-8) or np.linalg.det(r) < 0:
        raise InvalidModelError(f"{what} is not a rotation")
    return r


@dataclass(frozen=True)
class ObjectModel:
    """Model point set (mm, object frame) with its discrete symmetry group.

    The symmetry list always contains the identity; continuous symmetries
    are handed in pre-discretized (see discretized_symmetries).
    """

    points: np.ndarray
    symmetries: tuple = (np.eye(3),)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidModelError(f"points must be Nx3, got shape {pts.shape}")
        if pts.shape[0] < 4:
            raise InvalidModelError(f"need at least 4 model points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise InvalidModelError("model points must be finite")
        syms = tuple(
            _check_rotation(s, f"symmetry {i}") for i, s in enumerate(self.symmetries)
        )
        if not any(np.allclose(s, np.eye(3), atol=_ROTATION_TOL) for s in syms):
            raise InvalidModelError("symmetry set must include the identity")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "symmetries", syms)

    @property
    def diameter(self) -> float:
        """Largest pairwise point distance (mm)."""
        d2 = ((self.points[:, None, :] - self.points[None, :, :]) ** 2).sum(axis=2)
        return float(np.sqrt(d2.max()))


def discretized_symmetries(axis, steps: int = 36) -> tuple:
    """Rotations about an axis in `steps` even increments, identity first.

    36 steps is the conventional discretization for continuous symmetries.
    """
    if steps < 1:
        raise ValueError(f"steps must be positive, got {steps}")
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise ValueError("axis must be nonzero")
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    out = []
    for i in range(steps):
        a = 2.0 * np.pi * i / steps
        out.append(np.eye(3) + np.sin(a) * k + (1.0 - np.cos(a)) * (k @ k))
    return tuple(out)


# --- run-length masks --------------------------------------------------------------


@dataclass(frozen=True)
class RleMask:
    """Row-major run-length encoded binary mask.

    `counts` alternates run lengths starting with a (possibly zero) run of
    background pixels; counts always sum to the raster size.
    """

    shape: tuple
    counts: tuple

    def __post_init__(self):
        h, w = self.shape
        if h <= 0 or w <= 0:
            raise ValueError(f"degenerate mask shape {self.shape}")
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ValueError("run lengths must be non-negative")
        if sum(counts) != h * w:
            raise ValueError(
                f"run lengths sum to {sum(counts)}, raster holds {h * w} pixels"
            )
        object.__setattr__(self, "shape", (int(h), int(w)))
        object.__setattr__(self, "counts", counts)


def rle_encode(mask: np.ndarray) -> RleMask:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    flat = mask.reshape(-1)
    changes = np.nonzero(np.diff(flat))[0] + 1
    edges = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts = [0] + counts  # encoding starts with the background run
    return RleMask(mask.shape, tuple(counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    flat = np.zeros(rle.shape[0] * rle.shape[1], dtype=bool)
    pos = 0
    value = False
    for run in rle.counts:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(rle.shape)


@dataclass(frozen=True)
class DetectionRecord:
    """One scored detection: identity, masks, predicted and true pose.

    Camera intrinsics ride along because the projection metric needs them.
    """

    scene_id: int
    image_id: int
    object_id: int
    pred_mask: RleMask
    gt_mask: RleMask
    pred_pose: Pose6D
    gt_pose: Pose6D
    score: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if self.pred_mask.shape != self.gt_mask.shape:
            raise ValueError(
                f"mask rasters differ: {self.pred_mask.shape} vs {self.gt_mask.shape}"
            )


# --- metrics -----------------------------------------------------------------------


def _rotate(points: np.ndarray, r: np.ndarray) -> np.ndarray:
    # expanded instead of a matmul so every lane rounds exactly like scalar
    # reference arithmetic (BLAS kernels shift results by an ulp)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return np.stack(
        [
            r[0, 0] * x + r[0, 1] * y + r[0, 2] * z,
            r[1, 0] * x + r[1, 1] * y + r[1, 2] * z,
            r[2, 0] * x + r[2, 1] * y + r[2, 2] * z,
        ],
        axis=1,
    )


def mssd(pred: Pose6D, gt: Pose6D, model: ObjectModel) -> float:
    """Maximum symmetry-aware surface distance (mm).

    min over symmetries S of max over points x of
    |(R_p x + t_p) - (R_g S x + t_g)|; the symmetry composes on the
    ground-truth side.
    """
    if model.points.shape[0] == 0:
        raise InvalidModelError("empty point set")
    pred_pts = _rotate(model.points, pred.rotation) + pred.translation
    best = np.inf
    for sym in model.symmetries:
        gt_pts = _rotate(_rotate(model.points, sym), gt.rotation) + gt.translation
        d = pred_pts - gt_pts
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        best = min(best, float(np.sqrt(d2.max())))
    return best


def mspd(pred: Pose6D, gt: Pose6D, model: ObjectModel, k: CameraIntrinsics) -> float:
    """Maximum symmetry-aware projection distance (pixels)."""
    if model.points.shape[0] == 0:
        raise InvalidModelError("empty point set")
    pred_pts = _rotate(model.points, pred.rotation) + pred.translation
    if np.any(pred_pts[:, 2] <= 0):
        raise BehindCameraError("predicted pose puts model points behind the camera")
    pred_px = k.project(pred_pts)
    best = np.inf
    for sym in model.symmetries:
        gt_pts = _rotate(_rotate(model.points, sym), gt.rotation) + gt.translation
        if np.any(gt_pts[:, 2] <= 0):
            raise BehindCameraError(
                "ground-truth pose puts model points behind the camera"
            )
        gt_px = k.project(gt_pts)
        d = pred_px - gt_px
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
        best = min(best, float(np.sqrt(d2.max())))
    return best


def recall_curve(errors, thresholds) -> float:
    """Average recall: mean over thresholds of the fraction of errors below.

    Empty error lists yield 0.0 (callers wanting an explicit empty marker
    check before calling, as the robustness harness does).
    """
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("thresholds must be nonempty")
    if sorted(thresholds) != thresholds:
        raise ValueError("thresholds must be sorted ascending")
    errors = np.asarray(list(errors), dtype=np.float64)
    if errors.size == 0:
        return 0.0
    recalls = [(errors < t).mean() for t in thresholds]
    return float(np.mean(recalls))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


# --- robustness harness ------------------------------------------------------------


@dataclass(frozen=True)
class RobustnessRow:
    """One bucket of the robustness table; AR fields are None when empty."""

    iou_threshold: float
    n_records: int
    ar_mssd: float | None
    ar_mspd: float | None
    ar_mean: float | None


def robustness_curve(
    records,
    models: dict,
    iou_thresholds=DEFAULT_IOU_THRESHOLDS,
    mssd_factors=DEFAULT_MSSD_FACTORS,
    mspd_factors=DEFAULT_MSPD_FACTORS,
) -> list[RobustnessRow]:
    """AR per segmentation-quality bucket.

    For each IoU threshold tau the bucket keeps records whose predicted
    mask overlaps ground truth with IoU strictly smaller than tau (the
    harness probes how estimation degrades as segmentation gets worse).
    MSSD errors are normalized by each record's model diameter and swept
    over `mssd_factors`; MSPD errors by r = image-diagonal / 640 over
    `mspd_factors`. Empty buckets become rows with n_records = 0 and no AR
    values, not errors.
    """
    records = list(records)
    if not records:
        raise ValueError("records must be nonempty")
    mssd_norm = []
    mspd_norm = []
    ious = []
    for rec in records:
        model = models[rec.object_id]
        diameter = model.diameter
        if diameter <= 0:
            raise InvalidModelError("model diameter must be positive")
        h, w = rec.pred_mask.shape
        r = float(np.hypot(h, w)) / 640.0
        mssd_norm.append(mssd(rec.pred_pose, rec.gt_pose, model) / diameter)
        mspd_norm.append(mspd(rec.pred_pose, rec.gt_pose, model, rec.intrinsics) / r)
        ious.append(mask_iou(rle_decode(rec.pred_mask), rle_decode(rec.gt_mask)))
    mssd_norm = np.asarray(mssd_norm)
    mspd_norm = np.asarray(mspd_norm)
    ious = np.asarray(ious)

    rows = []
    for tau in iou_thresholds:
        keep = ious < float(tau)
        n = int(keep.sum())
        if n == 0:
            rows.append(RobustnessRow(float(tau), 0, None, None, None))
            continue
        ar_mssd = recall_curve(mssd_norm[keep], mssd_factors)
        ar_mspd = recall_curve(mspd_norm[keep], mspd_factors)
        rows.append(
            RobustnessRow(float(tau), n, ar_mssd, ar_mspd, (ar_mssd + ar_mspd) / 2.0)
        )
    return rows


def robustness_csv(rows) -> str:
    """Render the robustness table; empty buckets leave their AR cells blank."""
    out = io.StringIO()
    out.write(ROBUSTNESS_CSV_HEADER + "\n")
    for row in rows:
        cells = [f"{row.iou_threshold:g}", str(row.n_records)]
        for value in (row.ar_mssd, row.ar_mspd, row.ar_mean):
            cells.append("" if value is None else f"{value:.6f}")
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def record_errors_csv(records, models: dict) -> str:
    """Per-record error dump: identity, score, IoU, raw MSSD/MSPD."""
    out = io.StringIO()
    out.write("scene_id,im_id,obj_id,score,mask_iou,mssd_mm,mspd_px\n")
    for rec in records:
        model = models[rec.object_id]
        iou = mask_iou(rle_decode(rec.pred_mask), rle_decode(rec.gt_mask))
        e_s = mssd(rec.pred_pose, rec.gt_pose, model)
        e_p = mspd(rec.pred_pose, rec.gt_pose, model, rec.intrinsics)
        out.write(
            f"{rec.scene_id},{rec.image_id},{rec.object_id},"
            f"{rec.score:.6f},{iou:.6f},{e_s:.6f},{e_p:.6f}\n"
        )
    return out.getvalue()
