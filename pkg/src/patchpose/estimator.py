"""Relative-transform estimation from patch correspondences.

A tiny two-head MLP regresses, per correspondence, the relative scale and
in-plane rotation between the query and template crops from the pair of
variant-feature descriptors. Each correspondence then yields a full 2D
similarity hypothesis (the translation follows from the matched patch
centers), and an exhaustive, deterministic consensus pass picks the
hypothesis with the most inliers. A two-correspondence variant solves the
similarity directly from point pairs instead of using the regressor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateCorrespondenceError,
    EstimationFailedError,
    FormatError,
    InsufficientDataError,
    InvalidWeightsError,
    NoCorrespondencesError,
    UnreliableAngleError,
)
from .featuregrid import DEFAULT_GEOMETRY, PatchGeometry, patch_center
from .geometry import (
    Affine2,
    CameraIntrinsics,
    Pose6D,
    compose_template_to_query,
    kabsch2d,
    recover_pose,
)
from .matching import Correspondence, RetrievalResult

DEFAULT_DELTA_PX = 14.0
PAIR_CAP = 20_000
PAIR_CAP_SEED = 20_000  # fixed seed for the over-cap subsample, part of the contract

Layer = tuple[np.ndarray, np.ndarray]  # (weights (out, in), biases (out,))


def _validate_layers(layers: Sequence[Layer], name: str) -> tuple[Layer, ...]:
    if not layers:
        raise InvalidWeightsError(f"{name} has no layers")
    cleaned = []
    prev_out = None
    for li, (w, b) in enumerate(layers):
        w = np.asarray(w, dtype=np.float32)
        b = np.asarray(b, dtype=np.float32)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise InvalidWeightsError(
                f"{name} layer {li}: weights {w.shape} and biases {b.shape} mismatch"
            )
        if prev_out is not None and w.shape[1] != prev_out:
            raise InvalidWeightsError(
                f"{name} layer {li}: input {w.shape[1]} does not chain from {prev_out}"
            )
        prev_out = w.shape[0]
        cleaned.append((w, b))
    return tuple(cleaned)


@dataclass(frozen=True)
class RegressorWeights:
    """Two MLP heads: scale (1 output, ln s) and in-plane (2 outputs, cos/sin)."""

    scale_head: tuple[Layer, ...]
    inplane_head: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "scale_head", _validate_layers(self.scale_head, "scale head"))
        object.__setattr__(
            self, "inplane_head", _validate_layers(self.inplane_head, "in-plane head")
        )
        if self.scale_head[-1][0].shape[0] != 1:
            raise InvalidWeightsError("scale head must output 1 value")
        if self.inplane_head[-1][0].shape[0] != 2:
            raise InvalidWeightsError("in-plane head must output 2 values")
        if self.scale_head[0][0].shape[1] != self.inplane_head[0][0].shape[1]:
            raise InvalidWeightsError("heads disagree on input dimension")

    @property
    def input_dim(self) -> int:
        return self.scale_head[0][0].shape[1]


def mlp_forward(layers: Sequence[Layer], x: np.ndarray) -> np.ndarray:
    """Dense forward pass, ReLU between all layers but none after the last.

    Accepts a single vector or a batch of row vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    for li, (w, b) in enumerate(layers):
        if h.shape[1] != w.shape[1]:
            raise InvalidWeightsError(
                f"layer {li} expects input {w.shape[1]}, got {h.shape[1]}"
            )
        h = h @ w.T.astype(np.float64) + b.astype(np.float64)
        if li < len(layers) - 1:
            np.maximum(h, 0.0, out=h)
    return h[0] if single else h


def predict_scale_inplane(
    weights: RegressorWeights, feat_q: np.ndarray, feat_t: np.ndarray
) -> tuple[float, float]:
    """Relative (scale, in-plane angle) for one descriptor pair."""
    s, alpha = predict_scale_inplane_batch(
        weights, np.atleast_2d(feat_q), np.atleast_2d(feat_t)
    )
    return float(s[0]), float(alpha[0])


def predict_scale_inplane_batch(
    weights: RegressorWeights, feats_q: np.ndarray, feats_t: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized regression over aligned rows of query/template descriptors."""
    feats_q = np.atleast_2d(feats_q)
    feats_t = np.atleast_2d(feats_t)
    if feats_q.shape != feats_t.shape:
        raise ValueError(f"descriptor batches differ: {feats_q.shape} vs {feats_t.shape}")
    x = np.concatenate([feats_q, feats_t], axis=1)
    if x.shape[1] != weights.input_dim:
        raise InvalidWeightsError(
            f"regressor expects input {weights.input_dim}, got {x.shape[1]}"
        )
    ln_s = mlp_forward(weights.scale_head, x)[:, 0]
    cs = mlp_forward(weights.inplane_head, x)
    norms = np.hypot(cs[:, 0], cs[:, 1])
    if np.any(norms < 1e-6):
        bad = int(np.argmin(norms))
        raise UnreliableAngleError(
            f"in-plane output nearly zero (norm {norms[bad]:.3g}) at row {bad}"
        )
    return np.exp(ln_s), np.arctan2(cs[:, 1], cs[:, 0])


@dataclass(frozen=True)
class AffineHypothesis:
    """A candidate transform, its source correspondence, and its inliers."""

    transform: Affine2
    source_correspondence: int | tuple[int, int]
    inliers: tuple[int, ...]

    def __post_init__(self):
        if len(self.inliers) < 1:
            raise ValueError("a hypothesis is always an inlier of itself")


def hypothesis_from_correspondence(
    corr: Correspondence, s: float, alpha: float, geom: PatchGeometry = DEFAULT_GEOMETRY
) -> Affine2:
    """Similarity transform through one correspondence with known (s, alpha).

    Constructed so the template patch center maps exactly onto the query
    patch center.
    """
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    p_t = patch_center(corr.template_index, geom)
    p_q = patch_center(corr.query_index, geom)
    partial = Affine2(s, alpha)
    return Affine2(s, alpha, p_q - partial.apply(p_t))


def _patch_points(
    correspondences: Sequence[Correspondence], geom: PatchGeometry
) -> tuple[np.ndarray, np.ndarray]:
    p_t = np.array([patch_center(c.template_index, geom) for c in correspondences])
    p_q = np.array([patch_center(c.query_index, geom) for c in correspondences])
    return p_t, p_q


def _score_hypotheses(
    transforms: list[Affine2],
    p_t: np.ndarray,
    p_q: np.ndarray,
    scores: np.ndarray,
    delta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Inlier masks (H, N) and mean inlier similarities (H,) per hypothesis."""
    s = np.array([t.scale for t in transforms])
    a = np.array([t.alpha for t in transforms])
    t_xy = np.array([t.translation for t in transforms])
    cos, sin = np.cos(a), np.sin(a)
    # mapped[h, j] = s_h * R(a_h) @ p_t[j] + t_h
    mx = s[:, None] * (cos[:, None] * p_t[None, :, 0] - sin[:, None] * p_t[None, :, 1]) + t_xy[:, 0:1]
    my = s[:, None] * (sin[:, None] * p_t[None, :, 0] + cos[:, None] * p_t[None, :, 1]) + t_xy[:, 1:2]
    dist2 = (mx - p_q[None, :, 0]) ** 2 + (my - p_q[None, :, 1]) ** 2
    inliers = dist2 <= delta * delta
    counts = inliers.sum(axis=1)
    sums = inliers @ scores
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return inliers, means


def _pick_winner(counts: np.ndarray, means: np.ndarray) -> int:
    order = np.lexsort((np.arange(len(counts)), -means, -counts))
    return int(order[0])


def ransac_affine(
    correspondences: Sequence[Correspondence],
    predictions: Sequence[tuple[float, float]],
    delta: float = DEFAULT_DELTA_PX,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
) -> AffineHypothesis:
    """Exhaustive single-correspondence consensus.

    Every correspondence proposes the transform built from its predicted
    (s, alpha); the proposal whose mapped template patch centers land within
    delta of the most query patch centers wins. Ties break by higher mean
    inlier similarity, then smallest proposing index. No sampling, so the
    result is deterministic.
    """
    correspondences = list(correspondences)
    if not correspondences:
        raise NoCorrespondencesError("no correspondences to estimate from")
    if len(predictions) != len(correspondences):
        raise ValueError(
            f"{len(predictions)} predictions for {len(correspondences)} correspondences"
        )
    transforms = [
        hypothesis_from_correspondence(c, s, alpha, geom)
        for c, (s, alpha) in zip(correspondences, predictions)
    ]
    p_t, p_q = _patch_points(correspondences, geom)
    scores = np.array([c.score for c in correspondences])
    inliers, means = _score_hypotheses(transforms, p_t, p_q, scores, delta)
    best = _pick_winner(inliers.sum(axis=1), means)
    return AffineHypothesis(
        transforms[best], best, tuple(int(j) for j in np.nonzero(inliers[best])[0])
    )


def ransac_kabsch2(
    correspondences: Sequence[Correspondence],
    delta: float = DEFAULT_DELTA_PX,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
) -> AffineHypothesis:
    """Two-correspondence consensus via the closed-form similarity solve.

    Enumerates correspondence pairs (all of them up to a cap, a seeded
    subsample beyond), solves the exact two-point similarity for each, and
    scores inliers exactly like ransac_affine. Pairs with coincident patch
    centers on either side are skipped.
    """
    correspondences = list(correspondences)
    n = len(correspondences)
    if n < 2:
        raise InsufficientDataError(f"need at least 2 correspondences, got {n}")
    total = n * (n - 1) // 2
    if total <= PAIR_CAP:
        pair_ids = np.arange(total)
    else:
        rng = np.random.default_rng(PAIR_CAP_SEED)
        pair_ids = np.sort(rng.choice(total, size=PAIR_CAP, replace=False))
    # decode the linear index of pair (i, j), i < j, in lexicographic order
    counts_before = np.cumsum(np.arange(n - 1, 0, -1))
    i_idx = np.searchsorted(counts_before, pair_ids, side="right")
    base = np.where(i_idx > 0, counts_before[i_idx - 1], 0)
    j_idx = pair_ids - base + i_idx + 1

    p_t, p_q = _patch_points(correspondences, geom)
    scores = np.array([c.score for c in correspondences])
    transforms = []
    sources = []
    for i, j in zip(i_idx, j_idx):
        try:
            m = kabsch2d(p_t[i], p_t[j], p_q[i], p_q[j])
        except DegenerateCorrespondenceError:
            continue
        transforms.append(m)
        sources.append((int(i), int(j)))
    if not transforms:
        raise InsufficientDataError("all correspondence pairs were degenerate")
    inliers, means = _score_hypotheses(transforms, p_t, p_q, scores, delta)
    best = _pick_winner(inliers.sum(axis=1), means)
    return AffineHypothesis(
        transforms[best], sources[best], tuple(int(j) for j in np.nonzero(inliers[best])[0])
    )


@dataclass(frozen=True)
class TemplateMeta:
    """Per-template pose metadata needed to lift a 2D transform to 6D."""

    rotation: np.ndarray  # out-of-plane rotation R_ae
    crop: Affine2  # original -> processed template pixels
    center: np.ndarray  # object origin projection, original template pixels
    tz: float  # render distance, mm
    intrinsics: CameraIntrinsics


def select_hypothesis(
    topk: Sequence[RetrievalResult],
    predictions: Sequence[Sequence[tuple[float, float]]] | None,
    *,
    mode: str = "single",
    delta: float = DEFAULT_DELTA_PX,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
) -> tuple[int, AffineHypothesis]:
    """Run the chosen estimator on every retrieved candidate and pick one.

    Returns the winning candidate's position in `topk` plus its hypothesis.
    The candidate with the most inliers wins; ties break by retrieval
    similarity, then smaller template id. `predictions` holds one (s, alpha)
    list aligned with each candidate's correspondences (unused in kabsch
    mode). Raises only when every candidate fails, carrying per-candidate
    diagnostics.
    """
    if not topk:
        raise ValueError("no retrieval candidates")
    if mode not in ("single", "kabsch"):
        raise ValueError(f"unknown estimator mode {mode!r}")
    if mode == "single" and (predictions is None or len(predictions) != len(topk)):
        raise ValueError("single mode needs one prediction list per candidate")

    candidates = []
    diagnostics: dict[int, str] = {}
    for ci, result in enumerate(topk):
        try:
            if mode == "single":
                hyp = ransac_affine(result.correspondences, predictions[ci], delta, geom)
            else:
                hyp = ransac_kabsch2(result.correspondences, delta, geom)
        except (NoCorrespondencesError, InsufficientDataError) as exc:
            diagnostics[result.template_id] = str(exc)
            continue
        candidates.append((ci, result, hyp))
    if not candidates:
        raise EstimationFailedError("every candidate failed", diagnostics=diagnostics)

    def rank(entry):
        _, result, hyp = entry
        return (-len(hyp.inliers), -result.similarity, result.template_id)

    ci, _, hyp = min(candidates, key=rank)
    return ci, hyp


def recover_candidate_pose(
    meta: TemplateMeta,
    hypothesis: AffineHypothesis,
    query_crop: Affine2,
    query_intrinsics: CameraIntrinsics,
) -> Pose6D:
    """Lift a winning 2D hypothesis to a full 6D pose."""
    full = compose_template_to_query(meta.crop, hypothesis.transform, query_crop)
    return recover_pose(
        meta.rotation,
        hypothesis.transform.alpha,
        full,
        meta.center,
        meta.tz,
        meta.intrinsics,
        query_intrinsics,
    )


def select_pose(
    topk: Sequence[RetrievalResult],
    predictions: Sequence[Sequence[tuple[float, float]]] | None,
    templates_meta: Sequence[TemplateMeta],
    query_crop: Affine2,
    query_intrinsics: CameraIntrinsics,
    *,
    mode: str = "single",
    delta: float = DEFAULT_DELTA_PX,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
) -> tuple[int, AffineHypothesis, Pose6D]:
    """select_hypothesis plus pose recovery for the winner."""
    ci, hyp = select_hypothesis(topk, predictions, mode=mode, delta=delta, geom=geom)
    pose = recover_candidate_pose(
        templates_meta[ci], hyp, query_crop, query_intrinsics
    )
    return topk[ci].template_id, hyp, pose


# --- GPWT serialization -------------------------------------------------------

WEIGHTS_MAGIC = b"GPWT"
WEIGHTS_VERSION = 1


def write_weights(weights: RegressorWeights, destination) -> None:
    """Serialize regressor weights (GPWT format, little-endian)."""
    parts = [WEIGHTS_MAGIC, struct.pack("<HB", WEIGHTS_VERSION, 2)]
    for head in (weights.scale_head, weights.inplane_head):
        parts.append(struct.pack("<B", len(head)))
        for w, b in head:
            parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
            parts.append(w.astype("<f4").tobytes())
            parts.append(b.astype("<f4").tobytes())
    payload = b"".join(parts)
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "wb") as fh:
            fh.write(payload)


def read_weights(source) -> RegressorWeights:
    """Parse a GPWT weights file from a path, file object, or bytes."""
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif hasattr(source, "read"):
        raw = source.read()
    else:
        with open(source, "rb") as fh:
            raw = fh.read()

    if len(raw) < 7:
        raise FormatError(f"truncated header: got {len(raw)} bytes", offset=len(raw))
    if raw[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {WEIGHTS_MAGIC!r}", offset=0)
    version, head_count = struct.unpack_from("<HB", raw, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}", offset=4)
    if head_count != 2:
        raise FormatError(f"expected 2 heads, got {head_count}", offset=6)
    pos = 7
    heads = []
    for _ in range(head_count):
        if pos + 1 > len(raw):
            raise FormatError("truncated at layer count", offset=pos)
        (layer_count,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        layers = []
        for _ in range(layer_count):
            if pos + 8 > len(raw):
                raise FormatError("truncated at layer shape", offset=pos)
            rows, cols = struct.unpack_from("<II", raw, pos)
            pos += 8
            need = 4 * (rows * cols + rows)
            if pos + need > len(raw):
                raise FormatError(
                    f"truncated layer data: need {need} bytes at {pos}", offset=len(raw)
                )
            w = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=pos).reshape(
                rows, cols
            )
            pos += 4 * rows * cols
            b = np.frombuffer(raw, dtype="<f4", count=rows, offset=pos)
            pos += 4 * rows
            layers.append((w.copy(), b.copy()))
        heads.append(tuple(layers))
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes", offset=pos)
    try:
        return RegressorWeights(heads[0], heads[1])
    except InvalidWeightsError as exc:
        raise FormatError(f"invalid weights payload: {exc}", offset=7) from exc
