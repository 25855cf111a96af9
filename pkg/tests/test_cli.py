"""Command-line interface, run in-process through cli.main."""

import json

import numpy as np
import pytest

from patchpose.cli import main
from patchpose.evaluation import rle_encode
from patchpose.featuregrid import write_grid
from patchpose.geometry import CameraIntrinsics, Pose6D
from patchpose.gt_corr import write_depth
from patchpose.pipeline import make_synthetic_queries
from patchpose.store import read_store, synthetic_store, write_store
from patchpose.synthetic import sphere_depth

K_JSON = {"fx": 600.0, "fy": 600.0, "cx": 112.0, "cy": 112.0}
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _write_query_manifest(directory, n, seed=1, scene_id=2):
    observations, poses = make_synthetic_queries(n, seed=seed)
    queries = []
    for obs in observations:
        inv = f"q{obs.detection_id:03d}_inv.gpfg"
        var = f"q{obs.detection_id:03d}_var.gpfg"
        write_grid(obs.invariant, directory / inv)
        write_grid(obs.variant, directory / var)
        queries.append(
            {
                "detection_id": obs.detection_id,
                "scene_id": scene_id,
                "im_id": obs.image_id,
                "invariant": inv,
                "variant": var,
                "crop": {"scale": 1.0, "tx": 0.0, "ty": 0.0},
                "intrinsics": K_JSON,
            }
        )
    path = directory / "queries.json"
    path.write_text(json.dumps({"queries": queries}))
    return path, poses


def test_onboard_synthetic(tmp_path, capsys):
    out = tmp_path / "store.gpst"
    rc = main(["onboard", "--synthetic", "--object-id", "3", "-o", str(out)])
    assert rc == 0
    assert "162 templates" in capsys.readouterr().out
    store = read_store(out)
    assert len(store) == 162
    assert store.object_id == 3


def test_onboard_requires_exactly_one_source(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["onboard", "-o", str(tmp_path / "s.gpst")])
    assert exc.value.code == 2


def test_onboard_directory_failure_names_offender(tmp_path, capsys):
    (tmp_path / "manifest.json").write_text(json.dumps({
        "object_id": 1, "subdivisions": 0, "templates": [],
    }))
    rc = main(["onboard", "--input", str(tmp_path), "-o", str(tmp_path / "s.gpst")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "patchpose: error" in err
    assert "viewpoint 0" in err


def test_infer_writes_scored_rows(
    synth_store_path, regressor_weights_path, tmp_path, capsys
):
    manifest, _ = _write_query_manifest(tmp_path, 10)
    out = tmp_path / "poses.csv"
    rc = main([
        "infer", str(synth_store_path),
        "--weights", str(regressor_weights_path),
        "--queries", str(manifest),
        "-o", str(out),
    ])
    assert rc == 0
    assert "wrote 10 rows" in capsys.readouterr().out
    lines = out.read_text().splitlines()
    assert lines[0] == "scene_id,im_id,obj_id,score,R,t,time"
    assert len(lines) == 11
    for line in lines[1:]:
        fields = line.split(",")
        assert fields[0] == "2"
        assert fields[2] == "7"
        assert float(fields[3]) > 0.0
        assert len(fields[4].split()) == 9
        assert len(fields[5].split()) == 3


def test_infer_empty_manifest_gives_header_only(
    synth_store_path, regressor_weights_path, tmp_path
):
    manifest = tmp_path / "queries.json"
    manifest.write_text(json.dumps({"queries": []}))
    out = tmp_path / "poses.csv"
    rc = main([
        "infer", str(synth_store_path),
        "--weights", str(regressor_weights_path),
        "--queries", str(manifest),
        "-o", str(out),
    ])
    assert rc == 0
    assert out.read_text() == "scene_id,im_id,obj_id,score,R,t,time\n"


def test_infer_corrupt_weights_is_startup_error(
    synth_store_path, regressor_weights_path, tmp_path, capsys
):
    corrupt = tmp_path / "weights.gpwt"
    raw = bytearray(regressor_weights_path.read_bytes())
    raw[:4] = b"XXXX"
    corrupt.write_bytes(bytes(raw))
    manifest, _ = _write_query_manifest(tmp_path, 1)
    rc = main([
        "infer", str(synth_store_path),
        "--weights", str(corrupt),
        "--queries", str(manifest),
        "-o", str(tmp_path / "poses.csv"),
    ])
    assert rc == 1
    err = capsys.readouterr().err
    assert "GPWT" in err
    assert "byte offset 0" in err
    assert not (tmp_path / "poses.csv").exists()


def test_infer_corrupt_store_is_startup_error(
    synth_store_path, regressor_weights_path, tmp_path, capsys
):
    corrupt = tmp_path / "store.gpst"
    raw = bytearray(synth_store_path.read_bytes())
    raw[4:6] = b"\xff\xff"
    corrupt.write_bytes(bytes(raw))
    manifest, _ = _write_query_manifest(tmp_path, 1)
    rc = main([
        "infer", str(corrupt),
        "--weights", str(regressor_weights_path),
        "--queries", str(manifest),
        "-o", str(tmp_path / "poses.csv"),
    ])
    assert rc == 1
    err = capsys.readouterr().err
    assert "version" in err
    assert "byte offset 4" in err


def test_infer_missing_store_file(regressor_weights_path, tmp_path, capsys):
    manifest, _ = _write_query_manifest(tmp_path, 1)
    rc = main([
        "infer", str(tmp_path / "absent.gpst"),
        "--weights", str(regressor_weights_path),
        "--queries", str(manifest),
        "-o", str(tmp_path / "poses.csv"),
    ])
    assert rc == 1
    assert "absent.gpst" in capsys.readouterr().err


def test_infer_csv_stable_across_thread_env(
    synth_store_path, regressor_weights_path, tmp_path, monkeypatch
):
    manifest, _ = _write_query_manifest(tmp_path, 8)
    outputs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("GIGAPOSE_THREADS", threads)
        out = tmp_path / f"poses_{threads}.csv"
        assert main([
            "infer", str(synth_store_path),
            "--weights", str(regressor_weights_path),
            "--queries", str(manifest),
            "-o", str(out),
        ]) == 0
        outputs.append(
            "\n".join(",".join(l.split(",")[:-1]) for l in out.read_text().splitlines())
        )
    assert outputs[0] == outputs[1]


def _eval_manifest(tmp_path, n_good=2, n_bad=1):
    rng = np.random.default_rng(0)
    points = rng.normal(size=(50, 3)) * 30.0
    gt_pose = Pose6D(np.eye(3), np.array([0.0, 0.0, 500.0]))
    base = np.zeros((48, 48), bool)
    base[8:40, 8:40] = True
    shifted = np.zeros((48, 48), bool)
    shifted[8:40, 20:47] = True  # overlaps gt mask partially
    records = []
    for i in range(n_good + n_bad):
        good = i < n_good
        pred_t = gt_pose.translation + (0.0 if good else 300.0)
        pred_mask = rle_encode(base if good else shifted)
        gt_mask = rle_encode(base)
        records.append(
            {
                "scene_id": 0,
                "im_id": i,
                "obj_id": 1,
                "score": 0.9,
                "pred": {"R": [float(v) for v in np.eye(3).reshape(-1)],
                         "t": [float(v) for v in pred_t] if good else [300.0, 0.0, 500.0]},
                "gt": {"R": [float(v) for v in np.eye(3).reshape(-1)],
                       "t": [0.0, 0.0, 500.0]},
                "pred_mask": {"shape": list(pred_mask.shape),
                              "counts": [int(c) for c in pred_mask.counts]},
                "gt_mask": {"shape": list(gt_mask.shape),
                            "counts": [int(c) for c in gt_mask.counts]},
                "intrinsics": K_JSON,
            }
        )
    manifest = {
        "models": {"1": {"points": [[float(v) for v in p] for p in points]}},
        "records": records,
    }
    path = tmp_path / "eval.json"
    path.write_text(json.dumps(manifest))
    return path


def test_eval_writes_csv_and_figure(tmp_path, capsys):
    manifest = _eval_manifest(tmp_path)
    report = tmp_path / "report"
    rc = main(["eval", str(manifest), "-o", str(report)])
    assert rc == 0
    csv_text = (report / "robustness.csv").read_text()
    assert csv_text.splitlines()[0] == "iou_threshold,n_records,ar_mssd,ar_mspd,ar_mean"
    assert (report / "records.csv").read_text().count("\n") == 4
    png = (report / "robustness.png").read_bytes()
    assert png[:8] == PNG_MAGIC


def test_eval_with_symmetric_model_and_custom_thresholds(tmp_path):
    manifest_path = _eval_manifest(tmp_path)
    manifest = json.loads(manifest_path.read_text())
    manifest["models"]["1"]["symmetry_axis"] = {"axis": [0.0, 0.0, 1.0], "steps": 8}
    manifest["iou_thresholds"] = [0.4, 0.9]
    manifest_path.write_text(json.dumps(manifest))
    report = tmp_path / "report"
    assert main(["eval", str(manifest_path), "-o", str(report)]) == 0
    lines = (report / "robustness.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[1].startswith("0.4,")
    assert lines[2].startswith("0.9,")


def test_bench_writes_jsonl_and_figure(
    synth_store_path, regressor_weights_path, tmp_path, capsys
):
    out = tmp_path / "bench.jsonl"
    rc = main([
        "bench", str(synth_store_path),
        "--weights", str(regressor_weights_path),
        "--queries", "2", "--repeats", "2",
        "-o", str(out),
    ])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3
    stages = [json.loads(line)["stage"] for line in lines]
    assert stages == ["retrieval", "estimation", "pose_recovery"]
    assert (tmp_path / "bench.png").read_bytes()[:8] == PNG_MAGIC


def test_bench_zero_repeats_is_invalid_argument(
    synth_store_path, regressor_weights_path, tmp_path
):
    with pytest.raises(SystemExit) as exc:
        main([
            "bench", str(synth_store_path),
            "--weights", str(regressor_weights_path),
            "--repeats", "0",
            "-o", str(tmp_path / "bench.jsonl"),
        ])
    assert exc.value.code == 2


def test_gtcorr_writes_correspondences(tmp_path, capsys):
    k = CameraIntrinsics(600.0, 600.0, 112.0, 112.0)
    pose = Pose6D(np.eye(3), np.array([0.0, 0.0, 400.0]))
    write_depth(sphere_depth(pose, k, 46.67, (224, 224)), tmp_path / "a.gpdp")
    side = {
        "depth": "a.gpdp",
        "rotation": [float(v) for v in np.eye(3).reshape(-1)],
        "translation": [0.0, 0.0, 400.0],
        "intrinsics": K_JSON,
    }
    manifest = tmp_path / "pairs.json"
    manifest.write_text(json.dumps({"pairs": [{"source": side, "target": side}]}))
    out = tmp_path / "corrs.csv"
    rc = main(["gtcorr", str(manifest), "--symmetrize", "-o", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "pair,source_row,source_col,target_row,target_col,score"
    assert len(lines) > 1


def test_unreadable_eval_manifest(tmp_path, capsys):
    bad = tmp_path / "eval.json"
    bad.write_text("{not json")
    rc = main(["eval", str(bad), "-o", str(tmp_path / "report")])
    assert rc == 1
    assert "patchpose: error" in capsys.readouterr().err
