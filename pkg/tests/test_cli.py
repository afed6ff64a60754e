import filecmp
import json
import os

import pytest

from hbgs.cli import EXIT_OK, EXIT_USER, main
from hbgs.config import ConfigError, RunConfig, load_config
from hbgs.geometry import CameraPose


def test_config_defaults_and_preset():
    c = RunConfig()
    assert (c.k, c.lambda_ssim, c.lambda_vol, c.levels, c.reg_iterations) == (10, 0.2, 0.001, 3, 200)
    assert c.train_steps == 2000
    assert RunConfig(preset="full").train_steps == 30000


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"steps": 10, "learning_rate": 1}))
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(tmp_path / "c.json")


def test_overrides_apply_after_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"steps": 10, "seed": 3}))
    c = load_config(tmp_path / "c.json", ["steps=20", "optimize_poses=false"])
    assert (c.steps, c.seed, c.optimize_poses) == (20, 3, False)
    assert RunConfig.from_dict(json.loads(c.dumps())) == c


def dir_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(dir_equal(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


SYNTH = ["synth", "--seed", "7", "--cameras", "12", "--points", "500", "--rot-noise", "5"]


def test_synth_arity_and_determinism(tmp_path):
    assert main(SYNTH + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(SYNTH + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert len(os.listdir(tmp_path / "a" / "gt" / "images")) == 12
    assert dir_equal(tmp_path / "a", tmp_path / "b")


def test_synth_zero_noise(tmp_path):
    assert main(["synth", "--rot-noise", "0", "--trans-noise", "0", "--points", "20", "--cameras", "3",
                 "--out", str(tmp_path)]) == EXIT_OK
    views = json.loads((tmp_path / "manifest.json").read_text())["views"]
    assert all(v["rot_noise_deg"] == 0 and v["trans_noise"] == 0 for v in views)


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene"
    assert main(["synth", "--points", "5", "--cameras", "9", "--width", "24", "--height", "24", "--seed", "3",
                 "--out", str(scene)]) == EXIT_OK
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"feature_dim": 16, "k": 4, "levels": 1}))
    assert main(["train", str(scene), "--out", str(root / "train"), "--config", str(cfg), "--steps", "60"]) == EXIT_OK
    return root, scene, cfg


def test_train_outputs(pipeline_dirs):
    root, _, cfg = pipeline_dirs
    out = root / "train"
    for name in ("checkpoint.hbgs", "log.jsonl", "config.json", "summary.json", "timing.json", "figures/training.png"):
        assert (out / name).exists(), name
    rec = json.loads((out / "log.jsonl").read_text().splitlines()[0])
    assert {"step", "level", "l1", "ssim_term", "vol", "total"} <= set(rec)
    assert "rot_err_deg" in rec
    saved = json.loads((out / "config.json").read_text())
    assert saved["steps"] == 60 and saved["feature_dim"] == 16
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final_total"] < summary["initial_total"]
    assert len(os.listdir(out / "renders")) == 7  # 9 views, every 8th held out


def test_freeze_poses_keeps_input_poses(pipeline_dirs, tmp_path):
    root, scene, cfg = pipeline_dirs
    assert main(["train", str(scene), "--out", str(tmp_path), "--config", str(cfg), "--steps", "10",
                 "--freeze-poses"]) == EXIT_OK
    manifest = json.loads((scene / "manifest.json").read_text())
    train_views = [v for v in manifest["views"] if not v["test"]]
    poses = json.loads((tmp_path / "summary.json").read_text())["poses"]
    for got, v in zip(poses, train_views):
        assert got == CameraPose.from_vector(v["noisy_pose"]).normalized().as_vector().tolist()


def test_register_outputs(pipeline_dirs):
    root, scene, cfg = pipeline_dirs
    out = root / "reg"
    assert main(["register", str(root / "train" / "checkpoint.hbgs"), str(scene), "--out", str(out),
                 "--iterations", "20"]) == EXIT_OK
    res = json.loads((out / "registered.json").read_text())
    assert res["iterations"] == 20
    assert res["model_hash_before"] == res["model_hash_after"]
    row = res["views"][0]
    assert {"pose", "loss_before", "loss_after", "rot_err_before_deg", "rot_err_after_deg", "trans_err_before",
            "trans_err_after", "failed"} <= set(row)


def test_register_defaults_to_200_iterations(pipeline_dirs):
    root, scene, _ = pipeline_dirs
    cfg = load_config(None, [])
    assert cfg.reg_iterations == 200


def test_register_from_ground_truth(pipeline_dirs, tmp_path):
    root, scene, _ = pipeline_dirs
    assert main(["register", str(root / "train" / "checkpoint.hbgs"), str(scene), "--out", str(tmp_path),
                 "--iterations", "5", "--init", "gt"]) == EXIT_OK
    row = json.loads((tmp_path / "registered.json").read_text())["views"][0]
    assert row["rot_err_before_deg"] == 0 and row["trans_err_before"] == 0


def test_eval_schema(pipeline_dirs, tmp_path):
    root, scene, _ = pipeline_dirs
    assert main(["eval", "--checkpoint", str(root / "train" / "checkpoint.hbgs"), str(scene), "--out",
                 str(tmp_path / "a")]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(root / "train" / "checkpoint.hbgs"), str(scene), "--out",
                 str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "metrics.json").read_text()
    assert a == (tmp_path / "b" / "metrics.json").read_text()
    d = json.loads(a)
    assert set(d["mean"]) == {"psnr", "ssim", "lpips"} and d["mean"]["lpips"] == "n/a"


def test_eval_ground_truth_against_itself(pipeline_dirs, tmp_path):
    _, scene, _ = pipeline_dirs
    assert main(["eval", str(scene), "--images", str(scene / "gt" / "images"), "--views", "all",
                 "--out", str(tmp_path)]) == EXIT_OK
    d = json.loads((tmp_path / "metrics.json").read_text())
    assert d["mean"] == {"psnr": "inf", "ssim": 1.0, "lpips": "n/a"}


def test_render(pipeline_dirs, tmp_path):
    root, scene, _ = pipeline_dirs
    assert main(["render", str(root / "train" / "checkpoint.hbgs"), str(scene), "--views", "all",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert len(os.listdir(tmp_path)) == 9


def test_ablation_has_three_rows(pipeline_dirs, tmp_path):
    _, scene, cfg = pipeline_dirs
    assert main(["eval", str(scene), "--ablation", "--config", str(cfg), "--steps", "4",
                 "--set", "ablation_seeds=[0]", "--set", "reg_iterations=2", "--out", str(tmp_path)]) == EXIT_OK
    rows = json.loads((tmp_path / "ablation.json").read_text())["rows"]
    assert [r["name"] for r in rows] == ["anchors only", "+ image features", "+ bundle adjusting"]
    assert all(r["lpips"] == "n/a" for r in rows)
    assert (tmp_path / "figures" / "ablation.png").exists()


def test_user_errors(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_USER
    (tmp_path / "bad.json").write_text('{"bogus": 1}')
    assert main(["train", str(tmp_path), "--out", str(tmp_path / "o"), "--config", str(tmp_path / "bad.json")]) == EXIT_USER
    assert "unknown config key" in capsys.readouterr().err
    (tmp_path / "junk.hbgs").write_bytes(b"garbage")
    assert main(["register", str(tmp_path / "junk.hbgs"), str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_USER


def test_verify_matching_and_metrics(capsys):
    assert main(["verify", "matching", "metrics"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_plain_colmap_scene_without_manifest(pipeline_dirs, tmp_path):
    _, scene, cfg = pipeline_dirs
    assert main(["train", str(scene / "gt"), "--out", str(tmp_path), "--config", str(cfg), "--steps", "3"]) == EXIT_OK
    rec = json.loads((tmp_path / "log.jsonl").read_text().splitlines()[0])
    assert "rot_err_deg" not in rec
