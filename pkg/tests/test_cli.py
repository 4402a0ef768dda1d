import json
import subprocess
import sys

import numpy as np
import pytest

from svlf.checkpoint import load_checkpoint, save_checkpoint, to_bytes
from svlf.cli import main
from svlf.dataset import read_depth, read_png
from svlf.model import SVLFModel
from svlf.octree import GridConfig, SparseOctree
from svlf.scenegen import AnalyticScene, Box, generate_dataset, sample_hemisphere_cameras
from svlf.training import octree_from_dataset
from svlf.dataset import SceneDataset


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--seed", 7, "--views", 30, "--res", 64, "--out", root / "scene_a") == 0
    return root / "scene_a"


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_small")
    assert run("gen", "--seed", 3, "--views", 6, "--res", 24, "--out", root / "s") == 0
    return root / "s"


def test_gen_layout(scene):
    names = sorted(p.name for p in scene.iterdir())
    assert sum(n.startswith("rgb_") for n in names) == 30
    assert sum(n.startswith("depth_") for n in names) == 30
    assert sum(n.startswith("mask_") for n in names) == 30
    m = json.loads((scene / "scene.json").read_text())
    splits = [f["split"] for f in m["frames"]]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (20, 2, 8)
    assert m["resolution"] == [64, 64] and len(m["frames"][0]["camera_to_world"]) == 16
    cfg = json.loads((scene / "config.json").read_text())
    assert cfg["command"] == "gen" and cfg["seed"] == 7 and cfg["views"] == 30


def test_gen_usage_errors(tmp_path, capsys):
    assert run("gen", "--views", 0, "--out", tmp_path / "x") == 2
    assert "views must be ≥ 1" in capsys.readouterr().err
    assert run("gen", "--seed", -1, "--out", tmp_path / "x") == 2
    with pytest.raises(SystemExit) as e:
        run("gen", "--views", "many")
    assert e.value.code == 2
    assert run("gen", "--views", 3) == 2  # no --out


def test_gen_deterministic(tmp_path, monkeypatch):
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        monkeypatch.chdir(tmp_path / d)
        assert run("gen", "--seed", 5, "--views", 4, "--res", 16, "--out", "s") == 0
    for p in (tmp_path / "a" / "s").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / "s" / p.name).read_bytes()


def test_train_writes_checkpoints(small_scene, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--data", small_scene, "--out", out, "--epochs", "1,1,1", "--res", 24,
               "--grid", 16) == 0
    for name in ("stage1", "stage2", "stage3", "final"):
        assert (out / f"{name}.svlf").is_file()
    log = (out / "train.log").read_text().splitlines()
    assert len(log) == 3 and all(len(line.split("\t")) == 5 for line in log)


def test_train_usage_errors(small_scene, tmp_path):
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "r") == 2
    assert run("train", "--data", small_scene, "--out", tmp_path / "r", "--grid", 12) == 2
    assert run("train", "--data", small_scene, "--out", tmp_path / "r", "--lr", 0) == 2
    with pytest.raises(SystemExit):
        run("train", "--data", small_scene, "--epochs", "1,1")


def test_train_zero_epochs_is_initialisation(small_scene, tmp_path):
    out = tmp_path / "r0"
    assert run("train", "--data", small_scene, "--out", out, "--epochs", "0,0,0", "--grid", 16,
               "--seed", 9) == 0
    ds = SceneDataset.load(small_scene)
    fresh = SVLFModel.init(octree_from_dataset(ds, GridConfig(16)), seed=9)
    assert (out / "final.svlf").read_bytes() == to_bytes(fresh)


def test_config_precedence_and_replay(small_scene, tmp_path):
    cfg = {"command": "train", "data": str(small_scene), "out": str(tmp_path / "r1"),
           "epochs": [1, 0, 0], "grid": 16, "res": 24, "seed": 4, "lr": 5e-3}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    # flag beats file
    assert run("train", "--config", tmp_path / "c.json", "--lr", 2e-3) == 0
    echoed = json.loads((tmp_path / "r1" / "config.json").read_text())
    assert echoed["lr"] == 2e-3 and echoed["seed"] == 4 and echoed["epochs"] == [1, 0, 0]
    assert echoed["lambda_eta"] == 1.0  # default filled in
    # the echoed config alone reproduces the run
    echoed["out"] = str(tmp_path / "r2")
    (tmp_path / "c2.json").write_text(json.dumps(echoed))
    assert run("train", "--config", tmp_path / "c2.json") == 0
    assert (tmp_path / "r1" / "final.svlf").read_bytes() == (tmp_path / "r2" / "final.svlf").read_bytes()
    # bad config files are usage errors
    (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}))
    assert run("train", "--config", tmp_path / "bad.json") == 2
    (tmp_path / "wrong.json").write_text(json.dumps({"command": "gen"}))
    assert run("train", "--config", tmp_path / "wrong.json") == 2


def test_threads_env_default(small_scene, tmp_path, monkeypatch):
    monkeypatch.setenv("SVLF_THREADS", "3")
    assert run("train", "--data", small_scene, "--out", tmp_path / "t", "--epochs", "0,0,0",
               "--grid", 16) == 0
    assert run("gen", "--threads", 0, "--out", tmp_path / "g") == 2


@pytest.fixture(scope="module")
def trained(small_scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained") / "run"
    assert run("train", "--data", small_scene, "--out", out, "--epochs", "2,2,1", "--grid", 16) == 0
    return out / "final.svlf"


def test_render_outputs(trained, small_scene, tmp_path):
    out = tmp_path / "r"
    assert run("render", "--ckpt", trained, "--data", small_scene, "--out", out) == 0
    names = sorted(p.name for p in out.iterdir())
    # default split is test: one frame (index 5)
    assert names == ["alpha_00005.png", "config.json", "depth_00005.f32", "rgb_00005.png"]
    assert read_png(out / "rgb_00005.png").shape == (24, 24, 3)
    assert read_depth(out / "depth_00005.f32").shape == (24, 24)
    assert run("render", "--ckpt", trained, "--data", small_scene, "--out", tmp_path / "r2",
               "--frames", "0,2", "--res", 12) == 0
    assert read_png(tmp_path / "r2" / "rgb_00002.png").shape == (12, 12, 3)
    assert run("render", "--ckpt", trained, "--data", small_scene, "--out", tmp_path / "r3",
               "--frames", 99) == 2


def test_render_empty_octree_checkpoint(small_scene, tmp_path):
    m = SVLFModel.init(SparseOctree.empty(GridConfig(16)), seed=0)
    save_checkpoint(tmp_path / "empty.svlf", m)
    assert run("render", "--ckpt", tmp_path / "empty.svlf", "--data", small_scene,
               "--out", tmp_path / "r", "--split", "all") == 0
    for i in range(6):
        assert not read_png(tmp_path / "r" / f"rgb_{i:05d}.png").any()
        assert not read_png(tmp_path / "r" / f"alpha_{i:05d}.png").any()
        assert not read_depth(tmp_path / "r" / f"depth_{i:05d}.f32").any()


def test_runtime_failure_exit_1(small_scene, tmp_path):
    (tmp_path / "junk.svlf").write_bytes(b"garbage")
    assert run("render", "--ckpt", tmp_path / "junk.svlf", "--data", small_scene,
               "--out", tmp_path / "r") == 1
    assert run("render", "--ckpt", tmp_path / "none.svlf", "--data", small_scene,
               "--out", tmp_path / "r") == 2


def test_eval_report(trained, small_scene, tmp_path, capsys):
    out = tmp_path / "e"
    assert run("eval", "--ckpt", trained, "--data", small_scene, "--out", out, "--split", "all") == 0
    printed = capsys.readouterr().out
    tsv = (out / "metrics.tsv").read_text()
    assert printed == tsv
    rows = [line.split("\t") for line in tsv.splitlines()]
    assert rows[0] == ["frame", "psnr", "ssim", "depth_rmse_e3", "depth_mae_e3"]
    assert [r[0] for r in rows[-2:]] == ["mean", "std"] and len(rows) == 1 + 6 + 2
    js = json.loads((out / "metrics.json").read_text())
    vals = [float(r[1]) for r in rows[1:-2]]
    assert js["summary"]["psnr"]["mean"] == pytest.approx(np.mean(vals), abs=1e-5)
    assert js["summary"]["psnr"]["std"] == pytest.approx(np.std(vals), abs=1e-5)
    assert (out / "training_curve.png").is_file()
    assert len(list(out.glob("compare_*.png"))) == 6


def test_bench_identity(trained, small_scene, tmp_path, capsys):
    assert run("bench", "--ckpt", trained, "--data", small_scene, "--out", tmp_path / "b") == 0
    rep = json.loads((tmp_path / "b" / "bench.json").read_text())
    assert rep["queries_equal_traversal"] is True
    assert rep["decoder_queries"] == rep["traversal_hits"] > 0
    for k in ("ms_per_frame", "rays_per_s", "queries_per_ray", "queries_per_fg_ray"):
        assert rep[k] > 0
    assert "queries_equal_traversal\tTrue" in capsys.readouterr().out


def test_eval_overfit_single_image(tmp_path):
    """A one-voxel, one-image scene trained to convergence evaluates above 40 dB."""
    box = Box(np.full(3, 0.5005), np.full(3, 0.9995), np.array([0.8, 0.5, 0.3]))
    cams = sample_hemisphere_cameras(1, seed=0, resolution=32)
    generate_dataset(AnalyticScene([box]), cams, tmp_path / "one", (1, 0, 0))
    assert run("train", "--data", tmp_path / "one", "--out", tmp_path / "r", "--grid", 2,
               "--dilation", 0, "--epochs", "300,1500,200", "--val-every", 0) == 0
    assert run("eval", "--ckpt", tmp_path / "r" / "final.svlf", "--data", tmp_path / "one",
               "--out", tmp_path / "e", "--split", "train", "--no-figures") == 0
    rep = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert rep["summary"]["psnr"]["mean"] >= 40


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "svlf", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen", "train", "render", "eval", "bench"):
        assert cmd in r.stdout
