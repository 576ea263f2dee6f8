import json

import numpy as np
import pytest

from certainnet.cli import main
from certainnet.decode import Detection, read_detections, write_detections
from certainnet.metrics import EvalConfig, evaluate
from certainnet.synthdata import load_dataset

SCENE = {"height": 32, "width": 32, "size_range": [8, 14], "count_range": [1, 2],
         "count": 6, "seed": 3}
TRAIN = {"epochs": 2, "freeze_epochs": 1, "batch_size": 3, "widths": [4, 6, 8, 8, 8],
         "hyperspace_dim": 4}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def dir_bytes(path, skip=("run_manifest.json",)):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name not in skip}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A synthesized dataset and a checkpoint trained on it."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "scene.json", SCENE)
    tcfg = write_json(root / "train.json", TRAIN)
    assert main(["synth", "--config", cfg, "--out", str(root / "ds")]) == 0
    assert main(["train", str(root / "ds"), "--config", tcfg, "--out",
                 str(root / "m.ckpt"), "--seed", "1"]) == 0
    return root


def test_synth_writes_dataset_and_manifest(workdir):
    ds = workdir / "ds"
    assert len(load_dataset(ds)) == 6
    manifest = json.loads((ds / "run_manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 3
    assert manifest["config"]["scene"]["height"] == 32


def test_synth_byte_identical(workdir, tmp_path):
    cfg = str(workdir / "scene.json")
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert dir_bytes(tmp_path / "again") == dir_bytes(workdir / "ds")


def test_synth_usage_errors(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x")]) == 2
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out",
                 str(tmp_path / "x")]) == 2
    bad = write_json(tmp_path / "bad.json", {"height": 32, "bogus": 1})
    assert main(["synth", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    assert "usage error" in capsys.readouterr().err
    assert main(["synth"]) == 2


def test_synth_shifted(workdir, tmp_path):
    cfg = write_json(tmp_path / "s.json", {**SCENE, "shift": {"noise_sigma": 0.2},
                                           "shift_seed": 4})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "shifted")]) == 0
    clean, shifted = load_dataset(workdir / "ds"), load_dataset(tmp_path / "shifted")
    assert [s.image_id for s in clean] == [s.image_id for s in shifted]
    assert not np.array_equal(clean[0].image, shifted[0].image)


def test_train_outputs_and_determinism(workdir, tmp_path):
    assert (workdir / "m.ckpt.trace.csv").exists()
    manifest = json.loads((workdir / "m.ckpt.manifest.json").read_text())
    assert all(manifest["config"]["flags"].values())
    assert main(["train", str(workdir / "ds"), "--config", str(workdir / "train.json"),
                 "--out", str(tmp_path / "m.ckpt"), "--seed", "1"]) == 0
    assert (tmp_path / "m.ckpt").read_bytes() == (workdir / "m.ckpt").read_bytes()
    assert ((tmp_path / "m.ckpt.trace.csv").read_bytes()
            == (workdir / "m.ckpt.trace.csv").read_bytes())


def test_train_ablation_flag(workdir, tmp_path):
    out = tmp_path / "a0.ckpt"
    assert main(["train", str(workdir / "ds"), "--config", str(workdir / "train.json"),
                 "--ablation", "A0", "--epochs", "1", "--out", str(out)]) == 0
    flags = json.loads(out.with_name("a0.ckpt.manifest.json").read_text())["config"]["flags"]
    assert not any(flags.values())
    assert main(["train", str(workdir / "ds"), "--ablation", "A9", "--out", str(out)]) == 2


def test_train_missing_dataset(tmp_path):
    assert main(["train", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(workdir, tmp_path):
    cfg = write_json(tmp_path / "t.json", {**TRAIN, "learning_rate": 1e30})
    code = main(["train", str(workdir / "ds"), "--config", cfg, "--out",
                 str(tmp_path / "m.ckpt")])
    assert code == 4


def test_infer_deterministic_and_latency(workdir, tmp_path):
    args = ["infer", str(workdir / "ds"), "--checkpoint", str(workdir / "m.ckpt")]
    assert main(args + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    lat = (tmp_path / "a.jsonl.latency.csv").read_text().splitlines()
    assert lat[0] == "image_id,ms" and len(lat) == 7
    assert (tmp_path / "a.jsonl.manifest.json").exists()


def test_infer_post_hoc_matches_model_mode(workdir, tmp_path):
    dump = tmp_path / "heat.jsonl"
    assert main(["infer", str(workdir / "ds"), "--checkpoint", str(workdir / "m.ckpt"),
                 "--threshold", "0.05", "--export-heatmaps", str(dump),
                 "--out", str(tmp_path / "model.jsonl")]) == 0
    assert main(["infer", str(dump), "--threshold", "0.05",
                 "--out", str(tmp_path / "posthoc.jsonl")]) == 0
    assert (tmp_path / "model.jsonl").read_bytes() == (tmp_path / "posthoc.jsonl").read_bytes()
    manifest = json.loads((tmp_path / "posthoc.jsonl.manifest.json").read_text())
    assert manifest["config"]["mode"] == "post-hoc"


def test_infer_empty_dataset(workdir, tmp_path):
    cfg = write_json(tmp_path / "e.json", {**SCENE, "count": 0})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "empty")]) == 0
    assert main(["infer", str(tmp_path / "empty"), "--checkpoint", str(workdir / "m.ckpt"),
                 "--out", str(tmp_path / "d.jsonl")]) == 0
    assert (tmp_path / "d.jsonl").read_text() == ""
    assert json.loads((tmp_path / "d.jsonl.manifest.json").read_text())["command"] == "infer"


def test_infer_errors(workdir, tmp_path):
    assert main(["infer", str(workdir / "ds"), "--out", str(tmp_path / "d.jsonl")]) == 2
    assert main(["infer", str(tmp_path / "nothing"), "--out", str(tmp_path / "d.jsonl")]) == 3
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"junk")
    assert main(["infer", str(workdir / "ds"), "--checkpoint", str(bad),
                 "--out", str(tmp_path / "d.jsonl")]) == 3


def test_infer_class_mismatch(workdir, tmp_path):
    cfg = write_json(tmp_path / "s.json", {**SCENE, "class_shapes": ["rectangle"] * 4,
                                           "class_weights": [0, 0, 0, 1]})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "four")]) == 0
    assert main(["infer", str(tmp_path / "four"), "--checkpoint", str(workdir / "m.ckpt"),
                 "--out", str(tmp_path / "d.jsonl")]) == 3


def _perfect_detections(ds, path, score=1.0):
    dets = [Detection(int(c), b[0] + b[2] / 2, b[1] + b[3] / 2, b[2], b[3], score, 1 - score,
                      0.0, 0.0, 0.0, 0.0, 0.0, tuple(b), tuple(b), s.image_id)
            for s in load_dataset(ds) for b, c in zip(s.boxes.tolist(), s.classes)]
    write_detections(path, dets)


def test_eval_perfect_and_shifted_delta(workdir, tmp_path, capsys):
    dets = tmp_path / "perfect.jsonl"
    _perfect_detections(workdir / "ds", dets, score=0.8)
    out = tmp_path / "report"
    assert main(["eval", str(dets), str(workdir / "ds"), "--out", str(out),
                 "--shifted", str(dets)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["ap"] == 100.0
    assert report["shifted"]["delta_u_obj"] == 0.0
    assert json.loads(capsys.readouterr().out)["ap"] == 100.0
    for name in ("pr_curve.csv", "reliability.csv", "roc.csv", "run_manifest.json"):
        assert (out / name).exists()


def test_eval_matches_library(workdir, tmp_path):
    dets = tmp_path / "d.jsonl"
    assert main(["infer", str(workdir / "ds"), "--checkpoint", str(workdir / "m.ckpt"),
                 "--threshold", "0.05", "--out", str(dets)]) == 0
    out = tmp_path / "r"
    assert main(["eval", str(dets), str(workdir / "ds"), "--out", str(out), "--bins", "7"]) == 0
    grouped = {}
    for d in read_detections(dets):
        grouped.setdefault(d.image_id, []).append(d)
    scenes = load_dataset(workdir / "ds")
    lib = evaluate(grouped, {s.image_id: (s.boxes, s.classes) for s in scenes},
                   EvalConfig(n_bins=7)).summary()
    report = json.loads((out / "report.json").read_text())
    assert report == json.loads(json.dumps(lib, sort_keys=True))


def test_eval_unknown_ids(workdir, tmp_path, capsys):
    other = tmp_path / "o.jsonl"
    write_detections(other, [Detection(0, 5, 5, 4, 4, 0.9, 0.1, 0, 0, 0, 0, 0, (3, 3, 4, 4),
                                       (3, 3, 4, 4), "ghost")])
    assert main(["eval", str(other), str(workdir / "ds"), "--out", str(tmp_path / "r")]) == 3
    assert "ghost" in capsys.readouterr().err
