import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from priorrecon import cli, gsplat, trainer
from priorrecon.geomcore import CameraSet, Intrinsics, Pose, load_cameras, save_cameras
from priorrecon.gridio import read_grid

TINY_CONFIG = {
    "model": {"token_dim": 24, "depth": 2, "heads": 2, "head_features": 8, "gs_feature_dim": 4},
    "plan": {"stages": [
        {"name": "core", "epochs": 1, "active_heads": ["point", "depth", "camera", "normal"]},
        {"name": "gs", "epochs": 1, "active_heads": ["gs"], "trainable_modules": ["gs_head", "gs_attr"]},
    ]},
    "checkpoint_every": 0,
}


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["gen-data", "--out", str(data), "--scenes", "2", "--views", "2", "--seed", "5"]) == 0
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY_CONFIG))
    run = root / "run"
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    return {"root": root, "data": data, "cfg": cfg, "run": run, "ckpt": run / "checkpoints" / "final.pt"}


# -- gen-data -----------------------------------------------------------------------

def test_gen_data_layout(workspace):
    names = sorted(p.name for p in workspace["data"].iterdir())
    assert names == ["dataset.json", "scene_5", "scene_6"]
    assert len(list((workspace["data"] / "scene_5").glob("view_*.png"))) == 2


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--out", str(tmp_path / name), "--scenes", "2", "--views", "2"]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_gen_data_with_policy(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--scenes", "3", "--views", "2",
                     "--resolution-policy", "700,1600,0.5,2"]) == 0
    for d in tmp_path.glob("scene_*"):
        h, w = np.asarray(Image.open(d / "view_0.png")).shape[:2]
        assert 700 <= h * w <= 1600 and h % 16 == 0 and w % 16 == 0


def test_gen_data_bad_policy(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--resolution-policy", "300,320"]) == cli.EXIT_USAGE
    assert "resolution" in capsys.readouterr().err
    assert cli.main(["gen-data", "--out", str(tmp_path), "--resolution-policy", "abc"]) == cli.EXIT_USAGE


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["gen-data", "--out", str(blocker / "sub"), "--scenes", "1"]) == cli.EXIT_DATA


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as e:
        cli.main(["train"])
    assert e.value.code == cli.EXIT_USAGE


# -- train ------------------------------------------------------------------------

def test_train_outputs(workspace):
    run = workspace["run"]
    snap = json.loads((run / "config.json").read_text())
    assert snap["model"]["token_dim"] == 24 and snap["plan"]["stages"][1]["name"] == "gs"
    assert {p.name for p in (run / "checkpoints").iterdir()} >= {"stage0_core.pt", "stage1_gs.pt", "final.pt"}
    rows = (run / "losses.csv").read_text().splitlines()
    assert rows[0].startswith("step,stage,epoch") and len(rows) == 1 + 4


def test_train_resume_reproduces(workspace, tmp_path):
    out = tmp_path / "resumed"
    args = ["train", "--config", str(workspace["cfg"]), "--data", str(workspace["data"]), "--out", str(out),
            "--resume", str(workspace["run"] / "checkpoints" / "stage0_core.pt")]
    assert cli.main(args) == 0
    a = torch.load(workspace["ckpt"], weights_only=False)["model"]
    b = torch.load(out / "checkpoints" / "final.pt", weights_only=False)["model"]
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_train_overrides_and_bad_keys(workspace, tmp_path):
    base = ["train", "--config", str(workspace["cfg"]), "--data", str(workspace["data"]), "--out", str(tmp_path)]
    assert cli.main(base + ["--set", "model.bogus=1"]) == cli.EXIT_USAGE
    assert cli.main(base + ["--set", "seed=3", "--set", "plan.stages=[{name: s, epochs: 1, active_heads: [depth]}]"]) == 0
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 3


def test_train_missing_data(workspace, tmp_path):
    assert cli.main(["train", "--config", str(workspace["cfg"]), "--data", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_train_numerical_fault(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(trainer, "depth_loss", lambda *a, **k: torch.tensor(float("inf"), requires_grad=True))
    code = cli.main(["train", "--config", str(workspace["cfg"]), "--data", str(workspace["data"]),
                     "--out", str(tmp_path)])
    assert code == cli.EXIT_NUMERIC
    assert "'depth'" in capsys.readouterr().err


# -- infer ------------------------------------------------------------------------

FLAG_SETS = [[], ["--pose-prior"], ["--intr-prior"], ["--depth-prior"], ["--pose-prior", "--intr-prior"],
             ["--pose-prior", "--depth-prior"], ["--intr-prior", "--depth-prior"],
             ["--pose-prior", "--intr-prior", "--depth-prior"]]


@pytest.fixture(scope="module")
def inferred(workspace):
    scene = workspace["data"] / "scene_5"
    outs = {}
    for flags in FLAG_SETS:
        out = workspace["root"] / ("infer_" + "_".join(f.strip("-") for f in flags) or "infer_none")
        assert cli.main(["infer", "--ckpt", str(workspace["ckpt"]), "--images", str(scene), "--out", str(out)]
                        + flags) == 0
        outs[tuple(flags)] = out
    return outs


def test_infer_outputs(inferred):
    out = inferred[()]
    names = {p.name for p in out.iterdir()}
    for i in range(2):
        assert {f"depth_{i}.bin", f"gs_depth_{i}.bin", f"normal_{i}.bin", f"pointmap_{i}.bin", f"render_{i}.png"} <= names
    assert {"cameras.json", "cloud.gsc", "cloud.gsc.json", "config.json", "manifest.json"} <= names
    assert read_grid(out / "depth_0.bin").shape == (32, 32)
    assert len(gsplat.load_cloud(out / "cloud.gsc")) > 0
    assert json.loads((out / "manifest.json").read_text())["priors"] == {"pose": False, "intrinsics": False,
                                                                         "depth": False}


def test_all_priors_change_predictions(inferred):
    a = read_grid(inferred[()] / "depth_0.bin")
    b = read_grid(inferred[("--pose-prior", "--intr-prior", "--depth-prior")] / "depth_0.bin")
    assert not np.array_equal(a, b)


def test_infer_malformed_camera_json(workspace, tmp_path, capsys):
    bad = tmp_path / "cams.json"
    doc = json.loads((workspace["data"] / "scene_5" / "cameras.json").read_text())
    del doc["views"][1]["fx"]
    bad.write_text(json.dumps(doc))
    code = cli.main(["infer", "--ckpt", str(workspace["ckpt"]), "--images", str(workspace["data"] / "scene_5"),
                     "--out", str(tmp_path / "o"), "--intr-prior", str(bad)])
    assert code == cli.EXIT_DATA
    assert "fx" in capsys.readouterr().err


def test_infer_prior_view_mismatch(workspace, tmp_path):
    cams = load_cameras(workspace["data"] / "scene_5" / "cameras.json")
    three = tmp_path / "three.json"
    save_cameras(three, CameraSet(cams.poses + cams.poses[:1], cams.intrinsics + cams.intrinsics[:1]))
    code = cli.main(["infer", "--ckpt", str(workspace["ckpt"]), "--images", str(workspace["data"] / "scene_5"),
                     "--out", str(tmp_path / "o"), "--pose-prior", str(three)])
    assert code == cli.EXIT_DATA


def test_infer_bad_checkpoint(workspace, tmp_path):
    bad = tmp_path / "x.pt"
    bad.write_bytes(b"junk")
    assert cli.main(["infer", "--ckpt", str(bad), "--images", str(workspace["data"] / "scene_5"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


# -- eval -------------------------------------------------------------------------

def test_eval_perfect(workspace, tmp_path, capsys):
    scene = workspace["data"] / "scene_5"
    stem = tmp_path / "rep"
    assert cli.main(["eval", "--pred", str(scene), "--gt", str(scene), "--out", str(stem)]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    m = rep["metrics"]
    assert m["abs_rel"] == 0 and m["auc@5"] == 100 and m["focal_error"] == 0 and m["point_tau_1.03"] == 1
    assert m["normal_mean"] < 1e-3
    assert rep["protocol"]["depth_scaling"] == "mono" and "tasks" in rep["protocol"]
    assert (tmp_path / "rep.csv").exists()


def test_eval_task_subset_and_dataset_root(workspace, inferred, tmp_path):
    preds = tmp_path / "preds"
    preds.mkdir()
    for name in ("scene_5", "scene_6"):
        (preds / name).symlink_to(workspace["data"] / name)
    assert cli.main(["eval", "--pred", str(preds), "--gt", str(workspace["data"]), "--tasks", "depth",
                     "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert set(rep["metrics"]) == {"abs_rel", "delta_1.25", "inlier_1.03"}
    assert set(rep["per_scene"]) == {"scene_5", "scene_6"}
    # predictions from infer include renders, so novel-view metrics are available
    assert cli.main(["eval", "--pred", str(inferred[()]), "--gt", str(workspace["data"] / "scene_5"),
                     "--tasks", "depth,nvs", "--out", str(tmp_path / "n")]) == 0
    assert "psnr" in json.loads((tmp_path / "n.json").read_text())["metrics"]


def test_eval_layout_mismatch(workspace, tmp_path, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    code = cli.main(["eval", "--pred", str(pred), "--gt", str(workspace["data"] / "scene_5"), "--tasks", "depth",
                     "--out", str(tmp_path / "r")])
    assert code == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "depth_0.bin" in err and "depth_1.bin" in err
    assert cli.main(["eval", "--pred", str(pred), "--gt", str(pred), "--tasks", "bogus",
                     "--out", str(tmp_path / "r")]) == cli.EXIT_USAGE


# -- render -----------------------------------------------------------------------

def write_cam(path, pose=None):
    save_cameras(path, CameraSet([pose or Pose.identity()], [Intrinsics.centered(30.0, 32, 32)]))


def test_render_empty_cloud_is_background(tmp_path):
    gsplat.save_cloud(tmp_path / "c.gsc", gsplat.GaussianCloud.empty(), 0.01)
    write_cam(tmp_path / "cam.json")
    out = tmp_path / "img.png"
    assert cli.main(["render", "--cloud", str(tmp_path / "c.gsc"), "--camera", str(tmp_path / "cam.json"),
                     "--out", str(out), "--background", "1", "0", "0"]) == 0
    img = np.asarray(Image.open(out))
    assert (img == [255, 0, 0]).all()
    assert not read_grid(tmp_path / "img_depth.bin").any()


def test_render_deterministic_and_out_of_frustum(inferred, tmp_path):
    cloud = inferred[()] / "cloud.gsc"
    cams = inferred[()] / "cameras.json"
    for name in ("a.png", "b.png"):
        assert cli.main(["render", "--cloud", str(cloud), "--camera", str(cams), "--view", "1",
                         "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert np.asarray(Image.open(tmp_path / "a.png")).any()
    # looking away from the scene: nothing in the frustum
    away = Pose.from_rt(np.diag([1.0, -1.0, -1.0]), np.zeros(3))
    write_cam(tmp_path / "away.json", away)
    assert cli.main(["render", "--cloud", str(cloud), "--camera", str(tmp_path / "away.json"),
                     "--out", str(tmp_path / "c.png")]) == 0
    assert not np.asarray(Image.open(tmp_path / "c.png")).any()


def test_render_corrupt_cloud(tmp_path, capsys):
    (tmp_path / "c.gsc").write_bytes(b"XXXX\x00\x00\x00\x00")
    write_cam(tmp_path / "cam.json")
    assert cli.main(["render", "--cloud", str(tmp_path / "c.gsc"), "--camera", str(tmp_path / "cam.json"),
                     "--out", str(tmp_path / "i.png")]) == cli.EXIT_DATA
    assert "cloud" in capsys.readouterr().err
