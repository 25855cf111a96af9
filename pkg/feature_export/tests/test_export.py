"""Export pipeline and CLI tests."""

import json
import logging

import numpy as np
import pytest

from feature_export.cli import main as cli_main
from feature_export.crop import crop_params, patch_mask, resample_mask
from feature_export.export import ImageItem, export_grids, process_item
from feature_export.formats import read_grid


def _scene(seed: int = 0, size: int = 480):
    """Image with a bright square object on black, plus its mask and bbox."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 20, (size, size, 3))
    mask = np.zeros((size, size), dtype=bool)
    x0, y0 = rng.integers(40, size - 200, 2)
    w, h = rng.integers(80, 160, 2)
    mask[y0:y0 + h, x0:x0 + w] = True
    image[mask] += 200.0
    bbox = (float(x0), float(y0), float(x0 + w), float(y0 + h))
    return image, mask, bbox


def _item(item_id: str = "scene0", seed: int = 0) -> ImageItem:
    image, mask, bbox = _scene(seed)
    return ImageItem(item_id, image, mask, bbox, np.diag([600.0, 600.0, 1.0]))


def test_process_item_masks_background():
    item = _item()
    crop, patches, params = process_item(item, pad_ratio=0.2)
    assert crop.shape == (224, 224, 3)
    assert patches.shape == (16, 16)
    cropped_mask = resample_mask(item.mask, params)
    assert not crop[~cropped_mask].any()
    # boundary pixels blend with background, so check the bulk, not the min
    assert crop[cropped_mask].mean() > 150.0
    np.testing.assert_array_equal(patches, patch_mask(cropped_mask))


def test_process_item_skips_without_mask(caplog):
    item = _item()
    item.mask = None
    with caplog.at_level(logging.WARNING, logger="feature_export"):
        assert process_item(item, pad_ratio=0.0) is None
    assert "no object mask" in caplog.text


def test_process_item_skips_empty_object(caplog):
    image, mask, _ = _scene()
    # bbox far away from the object: mask is empty inside the crop
    item = ImageItem("off", image, mask, (0.0, 0.0, 10.0, 10.0), np.eye(3))
    with caplog.at_level(logging.WARNING, logger="feature_export"):
        assert process_item(item, pad_ratio=0.0) is None
    assert "empty" in caplog.text


def test_process_item_rejects_shape_mismatch():
    item = _item()
    item.mask = item.mask[:-10]
    with pytest.raises(ValueError, match="mask shape"):
        process_item(item, pad_ratio=0.0)


def test_intrinsics_must_be_3x3():
    image, mask, bbox = _scene()
    with pytest.raises(ValueError, match="intrinsics"):
        ImageItem("bad", image, mask, bbox, np.eye(4))


def test_export_grids_writes_files_and_manifest(tmp_path):
    items = [_item("a", seed=1), _item("b", seed=2)]
    results = export_grids(items, tmp_path, pad_ratio=0.1)
    assert [r.image_id for r in results] == ["a", "b"]

    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["pad_ratio"] == 0.1
    assert len(manifest["grids"]) == 4  # 2 items x 2 backbones
    for entry in manifest["grids"]:
        path = tmp_path / entry["file"]
        assert path.exists()
        data, mask, variant = read_grid(path)
        assert variant == entry["variant"]
        dim = 256 if entry["variant"] else 1024
        assert data.shape == (16, 16, dim)
        assert mask.any()
        params = crop_params(tuple(entry["bbox"]), manifest["pad_ratio"])
        assert entry["crop"]["scale"] == params.scale
        assert entry["crop"]["tx"] == params.tx
        assert entry["crop"]["ty"] == params.ty
        assert np.asarray(entry["intrinsics"]).shape == (3, 3)


def test_export_grids_skips_bad_items(tmp_path, caplog):
    good = _item("good")
    bad = _item("bad")
    bad.mask = None
    with caplog.at_level(logging.WARNING, logger="feature_export"):
        results = export_grids([good, bad], tmp_path)
    assert [r.image_id for r in results] == ["good"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {g["image_id"] for g in manifest["grids"]} == {"good"}


def test_export_grids_selected_backbone(tmp_path):
    results = export_grids([_item()], tmp_path, backbones=("rand-proj-256",))
    assert list(results[0].files) == ["rand-proj-256"]
    _, _, variant = read_grid(results[0].files["rand-proj-256"])
    assert variant


def _write_job(tmp_path, with_mask: bool = True) -> str:
    image, mask, bbox = _scene(seed=4)
    np.save(tmp_path / "img.npy", image)
    entry = {
        "id": "det0",
        "image": "img.npy",
        "bbox": list(bbox),
        "intrinsics": [[600.0, 0.0, 320.0], [0.0, 600.0, 240.0], [0.0, 0.0, 1.0]],
    }
    if with_mask:
        np.save(tmp_path / "msk.npy", mask.astype(np.uint8))
        entry["mask"] = "msk.npy"
    job = {"pad_ratio": 0.0, "images": [entry]}
    path = tmp_path / "job.json"
    path.write_text(json.dumps(job))
    return str(path)


def test_cli_exports_job(tmp_path, capsys):
    job = _write_job(tmp_path)
    out = tmp_path / "out"
    assert cli_main([job, "-o", str(out)]) == 0
    assert (out / "det0_rand-proj-1024.gpfg").exists()
    assert (out / "det0_rand-proj-256.gpfg").exists()
    assert (out / "manifest.json").exists()
    assert "exported 2 grids for 1 of 1 items" in capsys.readouterr().out


def test_cli_reports_errors(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli_main([str(missing), "-o", str(tmp_path / "out")]) == 1
    assert "feature-export: error:" in capsys.readouterr().err

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"images": [{"id": "x"}]}))
    assert cli_main([str(bad), "-o", str(tmp_path / "out")]) == 1
    assert "feature-export: error:" in capsys.readouterr().err
