"""Tests for depth-based ground-truth correspondence generation."""

import io
import struct

import numpy as np
import pytest

from patchpose.errors import FormatError
from patchpose.featuregrid import DEFAULT_GEOMETRY, PatchGeometry, patch_center
from patchpose.geometry import CameraIntrinsics, Pose6D, icosphere_viewpoints
from patchpose.gt_corr import (
    DEPTH_MAGIC,
    DEPTH_VERSION,
    DepthView,
    mask_from_depth,
    read_depth,
    reproject_correspondences,
    symmetrize,
    write_depth,
)
from patchpose.matching import Correspondence, template_similarity
from patchpose.synthetic import sphere_depth, synth_features

GEOM = DEFAULT_GEOMETRY
K600 = CameraIntrinsics(600.0, 600.0, 112.0, 112.0)
TZ = 400.0
# sphere sized so its silhouette just covers the synthetic descriptor disc
R_MM = 70.0 * TZ / 600.0
SHAPE = (224, 224)


def axis_rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def sphere_view(rotation, mask=None):
    pose = Pose6D(rotation, np.array([0.0, 0.0, TZ]))
    depth = sphere_depth(pose, K600, R_MM, SHAPE)
    if mask is None:
        mask = mask_from_depth(depth, GEOM)
    return DepthView(depth, K600, pose, mask)


def interior_mask(depth, max_rho=0.6):
    """Depth mask restricted to patches well inside the silhouette.

    Near the rim the surface slants steeply, so patch-center quantization
    moves lifted points by far more than a patch footprint; the round-trip
    bound only holds away from it.
    """
    mask = mask_from_depth(depth, GEOM)
    for row in range(GEOM.grid_side):
        for col in range(GEOM.grid_side):
            x, y = patch_center((row, col), GEOM)
            if np.hypot(x - 112.0, y - 112.0) > max_rho * 70.0:
                mask[row, col] = False
    return mask


def plane_view(pose=None, mask=None, depth_value=400.0):
    depth = np.full(SHAPE, depth_value)
    if pose is None:
        pose = Pose6D(np.eye(3), np.zeros(3))
    if mask is None:
        mask = np.ones((16, 16), dtype=bool)
    return DepthView(depth, K600, pose, mask)


# --- reproject_correspondences ----------------------------------------------------


def test_identical_views_give_identity_map():
    view = sphere_view(np.eye(3))
    corrs = reproject_correspondences(view, view, GEOM)
    assert len(corrs) == int(view.mask.sum())
    for c in corrs:
        assert c.query_index == c.template_index


def test_emitted_indices_respect_both_masks():
    r_rel = axis_rotation([0.0, 1.0, 0.0], np.deg2rad(10.0))
    src = sphere_view(np.eye(3))
    tgt = sphere_view(r_rel)
    corrs = reproject_correspondences(src, tgt, GEOM)
    assert corrs
    for c in corrs:
        assert src.mask[c.query_index]
        assert tgt.mask[c.template_index]


def test_translated_target_rejects_everything():
    src = plane_view()
    # shifting the target camera by 200 mm moves every projection ~300 px,
    # clean off the 224 px raster
    tgt = plane_view(pose=Pose6D(np.eye(3), np.array([200.0, 0.0, 0.0])))
    assert reproject_correspondences(src, tgt, GEOM) == []


def test_sphere_ten_degree_round_trip_within_patch_footprint():
    rotations = icosphere_viewpoints(2).rotations
    rng = np.random.default_rng(7)
    checked = 0
    for trial in range(5):
        r_src = rotations[int(rng.integers(len(rotations)))]
        axis = rng.normal(size=3)
        r_tgt = axis_rotation(axis, np.deg2rad(10.0)) @ r_src
        pose_s = Pose6D(r_src, np.array([0.0, 0.0, TZ]))
        pose_t = Pose6D(r_tgt, np.array([0.0, 0.0, TZ]))
        depth = sphere_depth(pose_s, K600, R_MM, SHAPE)
        # both poses keep the sphere center fixed, so the rasters coincide
        src = DepthView(depth, K600, pose_s, interior_mask(depth))
        tgt = DepthView(depth, K600, pose_t, interior_mask(depth))
        corrs = reproject_correspondences(src, tgt, GEOM)
        assert len(corrs) >= 25
        for c in corrs:
            p_s = lift_to_object(src, c.query_index)
            p_t = lift_to_object(tgt, c.template_index)
            z_s = depth_at_center(src, c.query_index)
            z_t = depth_at_center(tgt, c.template_index)
            bound = GEOM.patch_size * max(z_s / 600.0, z_t / 600.0)
            assert np.linalg.norm(p_s - p_t) <= bound
            checked += 1
    assert checked >= 125


def lift_to_object(view, index):
    """Independent lift: center pixel depth -> camera ray -> object frame."""
    x, y = patch_center(index, GEOM)
    z = view.depth[int(round(y)), int(round(x))]
    assert z > 0
    p_cam = z * np.array(
        [
            (x - view.intrinsics.cx) / view.intrinsics.fx,
            (y - view.intrinsics.cy) / view.intrinsics.fy,
            1.0,
        ]
    )
    return view.pose.rotation.T @ (p_cam - view.pose.translation)


def depth_at_center(view, index):
    x, y = patch_center(index, GEOM)
    return float(view.depth[int(round(y)), int(round(x))])


def test_quantization_tie_prefers_smaller_row_major_index():
    # shift projections +7 px in x: source center (7, 7) lands on x = 14,
    # exactly midway between target centers (7, 7) and (21, 7)
    src_mask = np.zeros((16, 16), dtype=bool)
    src_mask[0, 0] = True
    tgt_mask = np.zeros((16, 16), dtype=bool)
    tgt_mask[0, 0] = tgt_mask[0, 1] = True
    src = plane_view(mask=src_mask)
    shift = Pose6D(np.eye(3), np.array([7.0 * 400.0 / 600.0, 0.0, 0.0]))
    tgt = plane_view(pose=shift, mask=tgt_mask)
    corrs = reproject_correspondences(src, tgt, GEOM)
    assert [(c.query_index, c.template_index) for c in corrs] == [((0, 0), (0, 0))]


def test_unmasked_containing_patch_drops_pair():
    # same +7 px shift, but the containing patch (0, 1) is unmasked; the
    # nearby masked center (0, 0) must not rescue the pair
    src_mask = np.zeros((16, 16), dtype=bool)
    src_mask[0, 0] = True
    tgt_mask = np.zeros((16, 16), dtype=bool)
    tgt_mask[0, 0] = True
    src = plane_view(mask=src_mask)
    shift = Pose6D(np.eye(3), np.array([7.0 * 400.0 / 600.0, 0.0, 0.0]))
    tgt = plane_view(pose=shift, mask=tgt_mask)
    assert reproject_correspondences(src, tgt, GEOM) == []


def test_nearest_masked_center_can_differ_from_containing_patch():
    # containing patch (0, 1) is masked but projection x = 15 sits 6 px from
    # center (21, 7); if (0, 1) were unmasked-adjacent this would change, so
    # assert the plain nearest-center choice
    src_mask = np.zeros((16, 16), dtype=bool)
    src_mask[0, 0] = True
    tgt_mask = np.zeros((16, 16), dtype=bool)
    tgt_mask[0, 0] = tgt_mask[0, 1] = True
    src = plane_view(mask=src_mask)
    shift = Pose6D(np.eye(3), np.array([8.0 * 400.0 / 600.0, 0.0, 0.0]))
    tgt = plane_view(pose=shift, mask=tgt_mask)
    corrs = reproject_correspondences(src, tgt, GEOM)
    assert [(c.query_index, c.template_index) for c in corrs] == [((0, 0), (0, 1))]


def test_invalid_center_depth_skips_patch():
    depth = np.full(SHAPE, 400.0)
    depth[7, 7] = 0.0  # kill the center pixel of patch (0, 0)
    mask = np.ones((16, 16), dtype=bool)
    view = DepthView(depth, K600, Pose6D(np.eye(3), np.zeros(3)), mask)
    corrs = reproject_correspondences(view, view, GEOM)
    emitted = {c.query_index for c in corrs}
    assert (0, 0) not in emitted
    assert len(corrs) == 255
    for c in corrs:
        assert c.query_index == c.template_index


def test_no_valid_depth_yields_empty_list():
    view = DepthView(
        np.zeros(SHAPE), K600, Pose6D(np.eye(3), np.zeros(3)), np.ones((16, 16), bool)
    )
    assert reproject_correspondences(view, view, GEOM) == []


def test_point_behind_target_camera_skipped():
    src = plane_view()
    behind = Pose6D(np.eye(3), np.array([0.0, 0.0, -800.0]))
    tgt = plane_view(pose=behind)
    assert reproject_correspondences(src, tgt, GEOM) == []


def test_mask_shape_must_match_geometry():
    good = plane_view()
    bad = DepthView(
        np.full(SHAPE, 400.0),
        K600,
        Pose6D(np.eye(3), np.zeros(3)),
        np.ones((8, 8), dtype=bool),
    )
    with pytest.raises(ValueError, match="target mask"):
        reproject_correspondences(good, bad, GEOM)
    with pytest.raises(ValueError, match="source mask"):
        reproject_correspondences(bad, good, GEOM)


def test_consistency_with_descriptor_matching():
    # nearby views (6 degrees apart): descriptor matching should reproduce
    # the reprojected ground truth for at least 80% of its pairs; larger
    # baselines break this because descriptors rank by surface distance
    # while reprojection ranks by image distance
    rotations = icosphere_viewpoints(2).rotations
    rng = np.random.default_rng(1)
    moved = 0
    for trial in range(10):
        base = rotations[int(rng.integers(len(rotations)))]
        axis = rng.normal(size=3)
        r_rel = axis_rotation(axis, np.deg2rad(6.0))
        r_src, r_tgt = base, r_rel @ base
        g_src = synth_features(r_src, object_seed=trial, dim=64)
        g_tgt = synth_features(r_tgt, object_seed=trial, dim=64)
        src = sphere_view(r_src, mask=None)
        tgt = sphere_view(r_tgt, mask=None)
        src = DepthView(src.depth, K600, src.pose, src.mask & g_src.mask)
        tgt = DepthView(tgt.depth, K600, tgt.pose, tgt.mask & g_tgt.mask)
        gt = {
            (c.query_index, c.template_index)
            for c in symmetrize(
                reproject_correspondences(src, tgt, GEOM),
                reproject_correspondences(tgt, src, GEOM),
            )
        }
        moved += sum(q != t for q, t in gt)
        _, corrs = template_similarity(g_src, g_tgt)
        assert corrs
        hits = sum((c.query_index, c.template_index) in gt for c in corrs)
        assert hits / len(corrs) >= 0.8
    # the check must exercise non-identity pairs, not just the identity map
    assert moved > 0


# --- symmetrize --------------------------------------------------------------------


def c(q, t, score=1.0):
    return Correspondence(q, t, score)


def test_symmetrize_empty_backward_keeps_forward():
    fwd = [c((0, 0), (1, 1)), c((2, 3), (4, 5))]
    merged = symmetrize(fwd, [])
    assert [(x.query_index, x.template_index) for x in merged] == [
        ((0, 0), (1, 1)),
        ((2, 3), (4, 5)),
    ]


def test_symmetrize_mirrored_lists_dedup_to_forward_length():
    fwd = [c((0, 0), (1, 1)), c((2, 3), (4, 5)), c((9, 9), (9, 9))]
    bwd = [c(x.template_index, x.query_index) for x in fwd]
    assert len(symmetrize(fwd, bwd)) == len(fwd)


def test_symmetrize_disjoint_lists_union():
    fwd = [c((0, i), (1, i)) for i in range(5)]
    bwd = [c((5, i), (6, i)) for i in range(3)]
    merged = symmetrize(fwd, bwd)
    assert len(merged) == 8
    # backward pairs arrive flipped into forward orientation
    assert ((6, 0), (5, 0)) in {(x.query_index, x.template_index) for x in merged}


def test_symmetrize_is_idempotent_on_its_own_output():
    fwd = [c((0, 0), (1, 1))]
    bwd = [c((2, 2), (3, 3))]
    merged = symmetrize(fwd, bwd)
    again = symmetrize(merged, [c(x.template_index, x.query_index) for x in merged])
    assert len(again) == len(merged)


# --- DepthView validation ----------------------------------------------------------


def test_depth_view_rejects_negative_depth():
    depth = np.full(SHAPE, 400.0)
    depth[0, 0] = -1.0
    with pytest.raises(ValueError, match="finite and non-negative"):
        DepthView(depth, K600, Pose6D(np.eye(3), np.zeros(3)), np.ones((16, 16), bool))


def test_depth_view_rejects_nan():
    depth = np.full(SHAPE, 400.0)
    depth[3, 3] = np.nan
    with pytest.raises(ValueError, match="finite and non-negative"):
        DepthView(depth, K600, Pose6D(np.eye(3), np.zeros(3)), np.ones((16, 16), bool))


def test_depth_view_rejects_non_2d_raster():
    with pytest.raises(ValueError, match="must be 2D"):
        DepthView(
            np.zeros((4, 4, 4)),
            K600,
            Pose6D(np.eye(3), np.zeros(3)),
            np.ones((16, 16), bool),
        )


def test_depth_view_rejects_non_square_mask():
    with pytest.raises(ValueError, match="square"):
        DepthView(
            np.full(SHAPE, 1.0),
            K600,
            Pose6D(np.eye(3), np.zeros(3)),
            np.ones((16, 8), bool),
        )


def test_mask_from_depth_marks_patches_by_center_pixel():
    depth = np.zeros(SHAPE)
    depth[:, :112] = 400.0  # centers x = 7..105 valid, x = 119.. invalid
    mask = mask_from_depth(depth, GEOM)
    expected = np.zeros((16, 16), dtype=bool)
    expected[:, :8] = True
    assert np.array_equal(mask, expected)


def test_mask_from_depth_small_raster_leaves_outside_patches_unmasked():
    mask = mask_from_depth(np.full((10, 10), 5.0), GEOM)
    expected = np.zeros((16, 16), dtype=bool)
    expected[0, 0] = True  # only center (7, 7) is on the raster
    assert np.array_equal(mask, expected)


# --- GPDP serialization ------------------------------------------------------------


def test_depth_round_trip_through_file(tmp_path):
    rng = np.random.default_rng(0)
    depth = rng.random((37, 53)).astype(np.float32).astype(np.float64) * 900.0
    depth = depth.astype(np.float32).astype(np.float64)  # f32-representable
    path = tmp_path / "view.gpdp"
    write_depth(depth, path)
    assert np.array_equal(read_depth(path), depth)


def test_depth_round_trip_through_buffer():
    depth = np.array([[0.0, 125.5], [400.0, 3.25]])
    buf = io.BytesIO()
    write_depth(depth, buf)
    assert np.array_equal(read_depth(buf.getvalue()), depth)
    buf.seek(0)
    assert np.array_equal(read_depth(buf), depth)


def test_depth_header_layout():
    buf = io.BytesIO()
    write_depth(np.array([[7.0]]), buf)
    raw = buf.getvalue()
    assert raw[:4] == DEPTH_MAGIC == b"GPDP"
    version, h, w = struct.unpack_from("<HII", raw, 4)
    assert (version, h, w) == (DEPTH_VERSION, 1, 1)
    assert len(raw) == 14 + 4


def test_write_depth_rejects_bad_rasters():
    with pytest.raises(ValueError, match="must be 2D"):
        write_depth(np.zeros(5), io.BytesIO())
    with pytest.raises(ValueError, match="finite and non-negative"):
        write_depth(np.array([[-2.0]]), io.BytesIO())


def _valid_payload():
    buf = io.BytesIO()
    write_depth(np.array([[1.0, 2.0], [3.0, 4.0]]), buf)
    return bytearray(buf.getvalue())


def test_read_depth_truncated_header_offset():
    with pytest.raises(FormatError) as exc:
        read_depth(b"GPD")
    assert exc.value.offset == 3


def test_read_depth_bad_magic_offset():
    raw = _valid_payload()
    raw[:4] = b"XXXX"
    with pytest.raises(FormatError) as exc:
        read_depth(bytes(raw))
    assert exc.value.offset == 0


def test_read_depth_bad_version_offset():
    raw = _valid_payload()
    struct.pack_into("<H", raw, 4, 9)
    with pytest.raises(FormatError) as exc:
        read_depth(bytes(raw))
    assert exc.value.offset == 4


def test_read_depth_degenerate_dims_offset():
    raw = _valid_payload()
    struct.pack_into("<I", raw, 6, 0)
    with pytest.raises(FormatError) as exc:
        read_depth(bytes(raw))
    assert exc.value.offset == 6


def test_read_depth_truncated_raster_offset():
    raw = bytes(_valid_payload())[:-4]  # drop one f32
    with pytest.raises(FormatError) as exc:
        read_depth(raw)
    assert exc.value.offset == len(raw)


def test_read_depth_trailing_bytes_offset():
    raw = bytes(_valid_payload()) + b"\x00\x00"
    with pytest.raises(FormatError) as exc:
        read_depth(raw)
    assert exc.value.offset == 14 + 16


def test_read_depth_negative_value_offset():
    raw = _valid_payload()
    struct.pack_into("<f", raw, 14, -5.0)
    with pytest.raises(FormatError) as exc:
        read_depth(bytes(raw))
    assert exc.value.offset == 14
