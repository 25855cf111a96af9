"""Template store: onboarding, validation, and the GPST container format.

A store holds everything inference needs about one object: the canonical
viewpoint set and, per template, the out-of-plane rotation, an invariant
feature grid, a variant feature grid, the crop transform, the render
distance, and the camera intrinsics. Stores are immutable after onboarding
and serialize deterministically, so onboarding the same inputs twice yields
byte-identical files.

GPST layout: magic `GPST` | version u16 | manifest length u32 | manifest
JSON | block count u32 | per block (offset u64, length u64) | concatenated
GPFG blocks. Offsets are relative to the start of the block section.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, OnboardingError
from .estimator import TemplateMeta
from .featuregrid import (
    DEFAULT_GEOMETRY,
    FeatureGrid,
    PatchGeometry,
    grid_from_bytes,
    grid_to_bytes,
    read_grid,
)
from .geometry import Affine2, CameraIntrinsics, icosphere_viewpoints
from .matching import TemplateIndex
from .synthetic import synth_features, synth_variant_features

STORE_MAGIC = b"GPST"
STORE_VERSION = 1
_COUNT = struct.Struct("<I")
_BLOCK = struct.Struct("<QQ")

DEFAULT_TEMPLATE_TZ = 400.0
DEFAULT_TEMPLATE_INTRINSICS = CameraIntrinsics(600.0, 600.0, 112.0, 112.0)

ROTATION_MATCH_TOL = 1e-9


@dataclass(frozen=True)
class TemplateRecord:
    """One onboarded template."""

    rotation: np.ndarray
    invariant: FeatureGrid
    variant: FeatureGrid
    crop: Affine2
    center: np.ndarray
    tz: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        object.__setattr__(
            self, "rotation", np.asarray(self.rotation, dtype=np.float64)
        )
        object.__setattr__(
            self, "center", np.asarray(self.center, dtype=np.float64).reshape(2)
        )

    def meta(self) -> TemplateMeta:
        return TemplateMeta(
            rotation=self.rotation,
            crop=self.crop,
            center=self.center,
            tz=self.tz,
            intrinsics=self.intrinsics,
        )


@dataclass(frozen=True)
class TemplateStore:
    """Immutable collection of templates in canonical viewpoint order."""

    object_id: int
    subdivisions: int
    templates: tuple[TemplateRecord, ...]

    def __len__(self) -> int:
        return len(self.templates)

    def invariant_index(self) -> TemplateIndex:
        return TemplateIndex([t.invariant for t in self.templates])

    @property
    def variant_dim(self) -> int:
        return self.templates[0].variant.dim


@dataclass(frozen=True)
class QueryObservation:
    """One detection ready for inference.

    scene_id and image_id exist for reporting; they default to zero when the
    producing manifest does not track them.
    """

    detection_id: int
    invariant: FeatureGrid
    variant: FeatureGrid
    crop: Affine2
    intrinsics: CameraIntrinsics
    scene_id: int = 0
    image_id: int = 0


def _viewpoint_label(index: int, direction: np.ndarray) -> str:
    d = ", ".join(f"{v:.6f}" for v in direction)
    return f"viewpoint {index} (direction {d})"


def build_store(
    object_id: int,
    subdivisions: int,
    entries,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
) -> TemplateStore:
    """Validate onboarding entries and order them canonically by viewpoint.

    Each entry is a TemplateRecord whose rotation must match one canonical
    viewpoint exactly (within 1e-9). Missing viewpoints, duplicates, and
    shape disagreements raise OnboardingError naming the offender.
    """
    views = icosphere_viewpoints(subdivisions)
    canonical = views.rotations
    entries = list(entries)

    by_view: dict[int, TemplateRecord] = {}
    for entry in entries:
        matches = [
            i
            for i, r in enumerate(canonical)
            if np.allclose(entry.rotation, r, atol=ROTATION_MATCH_TOL)
        ]
        if not matches:
            raise OnboardingError(
                f"template rotation matches no canonical viewpoint at "
                f"subdivisions={subdivisions}"
            )
        view = matches[0]
        if view in by_view:
            raise OnboardingError(
                f"duplicate template for {_viewpoint_label(view, views.directions[view])}"
            )
        by_view[view] = entry

    missing = [i for i in range(len(canonical)) if i not in by_view]
    if missing:
        i = missing[0]
        raise OnboardingError(
            f"missing template for {_viewpoint_label(i, views.directions[i])} "
            f"({len(missing)} of {len(canonical)} absent)"
        )

    side = geom.grid_side
    ordered = [by_view[i] for i in range(len(canonical))]
    inv_dim = ordered[0].invariant.dim
    var_dim = ordered[0].variant.dim
    for i, rec in enumerate(ordered):
        label = _viewpoint_label(i, views.directions[i])
        for kind, grid, want_dim, want_variant in (
            ("invariant", rec.invariant, inv_dim, False),
            ("variant", rec.variant, var_dim, True),
        ):
            if grid.height != side or grid.width != side:
                raise OnboardingError(
                    f"{kind} grid of {label} is {grid.height}x{grid.width}, "
                    f"geometry wants {side}x{side}"
                )
            if grid.dim != want_dim:
                raise OnboardingError(
                    f"{kind} grid of {label} has dim {grid.dim}, expected {want_dim}"
                )
            if grid.variant != want_variant:
                raise OnboardingError(
                    f"{kind} grid of {label} has variant={grid.variant}"
                )
            if not grid.mask.any():
                raise OnboardingError(f"{kind} grid of {label} has an empty mask")
    return TemplateStore(int(object_id), int(subdivisions), tuple(ordered))


def synthetic_store(
    object_id: int = 1,
    subdivisions: int = 2,
    object_seed: int = 0,
    invariant_dim: int = 32,
    variant_dim: int = 16,
    tz: float = DEFAULT_TEMPLATE_TZ,
    intrinsics: CameraIntrinsics = DEFAULT_TEMPLATE_INTRINSICS,
    geom: PatchGeometry = DEFAULT_GEOMETRY,
) -> TemplateStore:
    """Onboard the synthetic provider: one template per canonical viewpoint.

    Templates are rendered centered at distance `tz`, so the crop transform
    is the identity and the object origin projects to the principal point.
    """
    center = np.array([intrinsics.cx, intrinsics.cy])
    entries = []
    for rotation in icosphere_viewpoints(subdivisions).rotations:
        entries.append(
            TemplateRecord(
                rotation=rotation,
                invariant=synth_features(
                    rotation, geom, object_seed=object_seed, dim=invariant_dim
                ),
                variant=synth_variant_features(
                    rotation, geom, object_seed=object_seed, dim=variant_dim
                ),
                crop=Affine2.identity(),
                center=center,
                tz=tz,
                intrinsics=intrinsics,
            )
        )
    return build_store(object_id, subdivisions, entries, geom)


# --- GPST serialization ------------------------------------------------------------


def _intrinsics_json(k: CameraIntrinsics) -> dict:
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy}


def _intrinsics_from_json(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(
        float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"])
    )


def _crop_json(crop: Affine2) -> dict:
    return {
        "scale": crop.scale,
        "tx": float(crop.translation[0]),
        "ty": float(crop.translation[1]),
    }


def _crop_from_json(d: dict) -> Affine2:
    return Affine2(float(d["scale"]), 0.0, np.array([float(d["tx"]), float(d["ty"])]))


def store_to_bytes(store: TemplateStore) -> bytes:
    blocks: list[bytes] = []
    manifest_templates = []
    for rec in store.templates:
        inv_block = len(blocks)
        blocks.append(grid_to_bytes(rec.invariant))
        var_block = len(blocks)
        blocks.append(grid_to_bytes(rec.variant))
        manifest_templates.append(
            {
                "rotation": [float(v) for v in rec.rotation.reshape(-1)],
                "crop": _crop_json(rec.crop),
                "center": [float(rec.center[0]), float(rec.center[1])],
                "tz": float(rec.tz),
                "intrinsics": _intrinsics_json(rec.intrinsics),
                "invariant_block": inv_block,
                "variant_block": var_block,
            }
        )
    manifest = {
        "object_id": store.object_id,
        "subdivisions": store.subdivisions,
        "templates": manifest_templates,
    }
    # canonical JSON so identical stores serialize to identical bytes
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()

    index = [_COUNT.pack(len(blocks))]
    offset = 0
    for raw in blocks:
        index.append(_BLOCK.pack(offset, len(raw)))
        offset += len(raw)
    return b"".join(
        [
            STORE_MAGIC,
            struct.pack("<H", STORE_VERSION),
            _COUNT.pack(len(manifest_bytes)),
            manifest_bytes,
            *index,
            *blocks,
        ]
    )


def write_store(store: TemplateStore, destination) -> None:
    payload = store_to_bytes(store)
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "wb") as fh:
            fh.write(payload)


def store_from_bytes(raw: bytes) -> TemplateStore:
    if len(raw) < 10:
        raise FormatError(f"truncated header: got {len(raw)} bytes", offset=len(raw))
    if raw[:4] != STORE_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {STORE_MAGIC!r}", offset=0)
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}", offset=4)
    (manifest_len,) = _COUNT.unpack_from(raw, 6)
    manifest_off = 10
    if len(raw) < manifest_off + manifest_len:
        raise FormatError("truncated manifest", offset=len(raw))
    try:
        manifest = json.loads(raw[manifest_off : manifest_off + manifest_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", offset=manifest_off)

    pos = manifest_off + manifest_len
    if len(raw) < pos + _COUNT.size:
        raise FormatError("truncated block index", offset=len(raw))
    (n_blocks,) = _COUNT.unpack_from(raw, pos)
    pos += _COUNT.size
    index = []
    for _ in range(n_blocks):
        if len(raw) < pos + _BLOCK.size:
            raise FormatError("truncated block index", offset=len(raw))
        index.append(_BLOCK.unpack_from(raw, pos))
        pos += _BLOCK.size
    blocks_start = pos

    def block(i: int) -> bytes:
        if not (0 <= i < n_blocks):
            raise FormatError(f"block id {i} out of range", offset=blocks_start)
        off, length = index[i]
        lo = blocks_start + off
        hi = lo + length
        if hi > len(raw):
            raise FormatError(f"block {i} overruns the file", offset=len(raw))
        return raw[lo:hi]

    records = []
    for t in manifest["templates"]:
        records.append(
            TemplateRecord(
                rotation=np.array(t["rotation"], dtype=np.float64).reshape(3, 3),
                invariant=grid_from_bytes(block(int(t["invariant_block"]))),
                variant=grid_from_bytes(block(int(t["variant_block"]))),
                crop=_crop_from_json(t["crop"]),
                center=np.array(t["center"], dtype=np.float64),
                tz=float(t["tz"]),
                intrinsics=_intrinsics_from_json(t["intrinsics"]),
            )
        )
    return build_store(int(manifest["object_id"]), int(manifest["subdivisions"]), records)


def read_store(source) -> TemplateStore:
    """Load a GPST store from a path, file object, or bytes."""
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif hasattr(source, "read"):
        raw = source.read()
    else:
        with open(source, "rb") as fh:
            raw = fh.read()
    return store_from_bytes(raw)


# --- directory onboarding ----------------------------------------------------------


def onboard_directory(directory, geom: PatchGeometry = DEFAULT_GEOMETRY) -> TemplateStore:
    """Build a store from a directory of GPFG pairs plus manifest.json.

    The manifest lists object_id, subdivisions, and one entry per template
    with its rotation (9 floats row-major), grid file names, crop, center,
    tz, and intrinsics.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise OnboardingError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise OnboardingError(f"manifest.json is not valid JSON: {exc}")

    entries = []
    for t in manifest.get("templates", []):
        grids = {}
        for kind in ("invariant", "variant"):
            name = t[kind]
            path = directory / name
            if not path.exists():
                raise OnboardingError(f"grid file {name} is missing from {directory}")
            grids[kind] = read_grid(path)
        entries.append(
            TemplateRecord(
                rotation=np.array(t["rotation"], dtype=np.float64).reshape(3, 3),
                invariant=grids["invariant"],
                variant=grids["variant"],
                crop=_crop_from_json(t["crop"]),
                center=np.array(t["center"], dtype=np.float64),
                tz=float(t["tz"]),
                intrinsics=_intrinsics_from_json(t["intrinsics"]),
            )
        )
    return build_store(
        int(manifest["object_id"]), int(manifest["subdivisions"]), entries, geom
    )
