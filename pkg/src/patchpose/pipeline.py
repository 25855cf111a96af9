"""Batch inference, benchmarking, and report-oriented plumbing.

Ties the store, retrieval, estimator, and pose recovery together into the
per-detection flow the CLI exposes: rank templates with invariant grids,
regress (s, alpha) from variant descriptor pairs, run the deterministic
consensus estimator, lift the winner to 6D. Detections are independent, so
inference runs on a thread pool capped by the GIGAPOSE_THREADS environment
variable without changing any output.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .errors import EngineError, InvalidWeightsError
from .estimator import (
    RegressorWeights,
    predict_scale_inplane_batch,
    recover_candidate_pose,
    select_hypothesis,
)
from .featuregrid import DEFAULT_GEOMETRY, PatchGeometry
from .geometry import (
    Affine2,
    CameraIntrinsics,
    Pose6D,
    compose_rotation,
    icosphere_viewpoints,
)
from .gt_corr import (
    DepthView,
    mask_from_depth,
    read_depth,
    reproject_correspondences,
    symmetrize,
)
from .matching import retrieve_topk
from .store import (
    DEFAULT_TEMPLATE_INTRINSICS,
    DEFAULT_TEMPLATE_TZ,
    QueryObservation,
    TemplateStore,
)
from .synthetic import synth_features, synth_variant_features

logger = logging.getLogger("patchpose.pipeline")

THREADS_ENV = "GIGAPOSE_THREADS"
INFER_CSV_HEADER = "scene_id,im_id,obj_id,score,R,t,time"
CORRESPONDENCE_CSV_HEADER = "pair,source_row,source_col,target_row,target_col,score"
BENCH_STAGES = ("retrieval", "estimation", "pose_recovery")

_IDENTITY_ROTATION = np.eye(3)
_ZERO_TRANSLATION = np.zeros(3)


@dataclass(frozen=True)
class InferRecord:
    """One CSV row worth of inference output."""

    scene_id: int
    image_id: int
    object_id: int
    detection_id: int
    score: float
    rotation: np.ndarray
    translation: np.ndarray
    time_s: float
    template_id: int | None = None
    error: str | None = None


def resolve_threads(n_tasks: int) -> int:
    """Worker count for a batch, honoring the GIGAPOSE_THREADS cap."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
        if cap < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {cap}")
    return max(1, min(cap, n_tasks))


def _candidate_predictions(store, topk, obs, weights):
    """One (s, alpha) list per candidate from variant descriptor pairs."""
    predictions = []
    for result in topk:
        corrs = result.correspondences
        if not corrs:
            predictions.append([])
            continue
        template = store.templates[result.template_id].variant
        fq = np.stack([obs.variant.data[c.query_index] for c in corrs])
        ft = np.stack([template.data[c.template_index] for c in corrs])
        s, alpha = predict_scale_inplane_batch(weights, fq, ft)
        predictions.append(list(zip(s.tolist(), alpha.tolist())))
    return predictions


def infer_staged(
    store: TemplateStore,
    index,
    weights: RegressorWeights,
    obs: QueryObservation,
    config: PipelineConfig,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
):
    """Run one detection through all three stages, timing each.

    Returns (template_id, hypothesis, pose, score, stage_seconds). The score
    is the winning inlier count over the number of masked query patches.
    """
    t0 = time.perf_counter()
    topk = retrieve_topk(
        obs.invariant, index, config.top_k, config.similarity_threshold
    )
    t1 = time.perf_counter()
    predictions = None
    if config.estimator_mode == "single":
        predictions = _candidate_predictions(store, topk, obs, weights)
    ci, hyp = select_hypothesis(
        topk,
        predictions,
        mode=config.estimator_mode,
        delta=config.ransac_delta_px,
        geom=geom,
    )
    t2 = time.perf_counter()
    meta = store.templates[topk[ci].template_id].meta()
    pose = recover_candidate_pose(meta, hyp, obs.crop, obs.intrinsics)
    t3 = time.perf_counter()
    score = len(hyp.inliers) / int(obs.invariant.mask.sum())
    stages = {"retrieval": t1 - t0, "estimation": t2 - t1, "pose_recovery": t3 - t2}
    return topk[ci].template_id, hyp, pose, score, stages


def _check_weights(store: TemplateStore, weights: RegressorWeights) -> None:
    want = 2 * store.variant_dim
    if weights.input_dim != want:
        raise InvalidWeightsError(
            f"regressor expects input {weights.input_dim}, store variant grids "
            f"need {want}"
        )


def infer(
    store: TemplateStore,
    observations,
    weights: RegressorWeights,
    config: PipelineConfig = PipelineConfig(),
    geom: PatchGeometry = DEFAULT_GEOMETRY,
) -> list[InferRecord]:
    """Estimate a pose for every observation, in input order.

    A detection that fails estimation yields a score-0 row with the identity
    pose and a diagnostics log entry instead of aborting the batch.
    """
    observations = list(observations)
    if config.estimator_mode == "single":
        _check_weights(store, weights)
    if not observations:
        return []
    index = store.invariant_index()

    def run(obs: QueryObservation) -> InferRecord:
        start = time.perf_counter()
        try:
            template_id, hyp, pose, score, _ = infer_staged(
                store, index, weights, obs, config, geom
            )
        except (EngineError, ValueError) as exc:
            logger.warning("detection %d failed: %s", obs.detection_id, exc)
            return InferRecord(
                scene_id=obs.scene_id,
                image_id=obs.image_id,
                object_id=store.object_id,
                detection_id=obs.detection_id,
                score=0.0,
                rotation=_IDENTITY_ROTATION,
                translation=_ZERO_TRANSLATION,
                time_s=time.perf_counter() - start,
                error=str(exc),
            )
        return InferRecord(
            scene_id=obs.scene_id,
            image_id=obs.image_id,
            object_id=store.object_id,
            detection_id=obs.detection_id,
            score=score,
            rotation=pose.rotation,
            translation=pose.translation,
            time_s=time.perf_counter() - start,
            template_id=template_id,
        )

    workers = resolve_threads(len(observations))
    if workers == 1:
        return [run(obs) for obs in observations]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, observations))


def infer_csv(records) -> str:
    """Render inference records as CSV (header always present).

    R is nine space-separated floats row-major, t is three floats in mm,
    both at full round-trip precision so downstream evaluation is lossless.
    """
    lines = [INFER_CSV_HEADER]
    for r in records:
        rot = " ".join(repr(float(v)) for v in np.asarray(r.rotation).reshape(-1))
        t = " ".join(repr(float(v)) for v in np.asarray(r.translation).reshape(-1))
        lines.append(
            f"{r.scene_id},{r.image_id},{r.object_id},{r.score:.6f},{rot},{t},"
            f"{r.time_s:.6f}"
        )
    return "\n".join(lines) + "\n"


# --- synthetic query generation ----------------------------------------------------


def make_synthetic_queries(
    n: int,
    *,
    object_seed: int = 0,
    subdivisions: int = 2,
    invariant_dim: int = 32,
    variant_dim: int = 16,
    seed: int = 0,
    scale_range: tuple[float, float] = (0.75, 1.3),
    max_offset_px: float = 30.0,
    tz: float = DEFAULT_TEMPLATE_TZ,
    intrinsics: CameraIntrinsics = DEFAULT_TEMPLATE_INTRINSICS,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
) -> tuple[list[QueryObservation], list[Pose6D]]:
    """Render n synthetic detections with known ground-truth poses.

    Each query picks a canonical viewpoint plus a random in-plane angle,
    scale, and pixel offset. The returned poses follow the perspective
    reading of those render parameters: distance tz / scale, translation
    along the pixel-offset ray.
    """
    if n < 1:
        raise ValueError(f"need at least one query, got {n}")
    rng = np.random.default_rng(seed)
    views = icosphere_viewpoints(subdivisions).rotations
    observations = []
    poses = []
    for i in range(n):
        r_ae = views[int(rng.integers(len(views)))]
        alpha = float(rng.uniform(-np.pi, np.pi))
        scale = float(rng.uniform(*scale_range))
        ox, oy = (float(v) for v in rng.uniform(-max_offset_px, max_offset_px, 2))
        rotation = compose_rotation(alpha, r_ae)
        observations.append(
            QueryObservation(
                detection_id=i,
                invariant=synth_features(
                    rotation, geom, object_seed, invariant_dim,
                    scale=scale, offset=(ox, oy),
                ),
                variant=synth_variant_features(
                    rotation, geom, object_seed, variant_dim,
                    scale=scale, offset=(ox, oy),
                ),
                crop=Affine2.identity(),
                intrinsics=intrinsics,
                image_id=i,
            )
        )
        tz_q = tz / scale
        poses.append(
            Pose6D(
                rotation,
                np.array(
                    [tz_q * ox / intrinsics.fx, tz_q * oy / intrinsics.fy, tz_q]
                ),
            )
        )
    return observations, poses


# --- benchmarking ------------------------------------------------------------------


def bench(
    store: TemplateStore,
    weights: RegressorWeights,
    observations,
    repeats: int,
    config: PipelineConfig = PipelineConfig(),
    geom: PatchGeometry = DEFAULT_GEOMETRY,
) -> list[dict]:
    """Per-stage latency percentiles over repeats x observations runs.

    Returns one dict per stage (retrieval, estimation, pose_recovery) with
    p50/p90/p99/mean in milliseconds, ready for JSONL serialization.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    observations = list(observations)
    if not observations:
        raise ValueError("bench needs at least one observation")
    if config.estimator_mode == "single":
        _check_weights(store, weights)
    index = store.invariant_index()

    samples: dict[str, list[float]] = {stage: [] for stage in BENCH_STAGES}
    for _ in range(repeats):
        for obs in observations:
            _, _, _, _, stages = infer_staged(store, index, weights, obs, config, geom)
            for stage in BENCH_STAGES:
                samples[stage].append(stages[stage] * 1e3)

    rows = []
    for stage in BENCH_STAGES:
        arr = np.array(samples[stage])
        rows.append(
            {
                "stage": stage,
                "n": int(arr.size),
                "p50_ms": float(np.percentile(arr, 50)),
                "p90_ms": float(np.percentile(arr, 90)),
                "p99_ms": float(np.percentile(arr, 99)),
                "mean_ms": float(arr.mean()),
            }
        )
    return rows


def bench_jsonl(rows) -> str:
    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)


# --- ground-truth correspondence reports -------------------------------------------


def _view_from_spec(spec: dict, base_dir, geom: PatchGeometry) -> DepthView:
    depth = read_depth(os.path.join(base_dir, spec["depth"]))
    pose = Pose6D(
        np.array(spec["rotation"], dtype=np.float64).reshape(3, 3),
        np.array(spec["translation"], dtype=np.float64),
    )
    k = spec["intrinsics"]
    intrinsics = CameraIntrinsics(
        float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"])
    )
    return DepthView(depth, intrinsics, pose, mask_from_depth(depth, geom))


def gt_corr_report(
    manifest: dict, base_dir, geom: PatchGeometry = DEFAULT_GEOMETRY
) -> str:
    """Reproject every depth pair in a manifest into a correspondence CSV.

    Manifest shape: {"pairs": [{"source": {...}, "target": {...}}, ...]},
    each side naming a GPDP file plus its pose and intrinsics. Pairs are
    symmetrized when the manifest sets "symmetrize" to true.
    """
    lines = [CORRESPONDENCE_CSV_HEADER]
    for pair_id, pair in enumerate(manifest.get("pairs", [])):
        source = _view_from_spec(pair["source"], base_dir, geom)
        target = _view_from_spec(pair["target"], base_dir, geom)
        corrs = reproject_correspondences(source, target, geom)
        if manifest.get("symmetrize", False):
            backward = reproject_correspondences(target, source, geom)
            corrs = symmetrize(corrs, backward)
        for c in corrs:
            (sr, sc), (tr, tc) = c.query_index, c.template_index
            lines.append(f"{pair_id},{sr},{sc},{tr},{tc},{c.score:.6f}")
    return "\n".join(lines) + "\n"
