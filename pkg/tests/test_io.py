import numpy as np
import pytest

from svlf.checkpoint import CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from svlf.dataset import DEPTH_MAGIC, DatasetError, read_depth, read_png, write_depth, write_png
from svlf.model import SVLFModel
from svlf.octree import GridConfig, SparseOctree, build_octree
from svlf.rendering import render_image
from svlf.camera import look_at, make_camera


def test_depth_file_format(tmp_path, rng):
    d = rng.uniform(0, 3, (5, 7)).astype(np.float32)
    write_depth(tmp_path / "d.f32", d)
    raw = (tmp_path / "d.f32").read_bytes()
    assert raw[:4] == DEPTH_MAGIC and len(raw) == 16 + 4 * 35
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [7, 5, 1]
    assert np.array_equal(read_depth(tmp_path / "d.f32"), d)
    (tmp_path / "bad.f32").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetError):
        read_depth(tmp_path / "bad.f32")
    (tmp_path / "short.f32").write_bytes(raw[:-4])
    with pytest.raises(DatasetError):
        read_depth(tmp_path / "short.f32")


def test_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (6, 4, 3)) / 255.0
    write_png(tmp_path / "a.png", img)
    assert np.allclose(read_png(tmp_path / "a.png"), img, atol=1e-7)


def trained_like_model(seed=0):
    o = build_octree(np.random.default_rng(seed).uniform(0.3, 0.7, (50, 3)), GridConfig(16))
    m = SVLFModel.init(o, seed=seed)
    m.adam_thickness.step = 7
    m.adam_color.m[2][...] = 0.25
    return m


def test_checkpoint_roundtrip(tmp_path):
    m = trained_like_model()
    save_checkpoint(tmp_path / "m.svlf", m)
    raw = (tmp_path / "m.svlf").read_bytes()
    assert raw[:8] == b"SVLF0001"
    n = load_checkpoint(tmp_path / "m.svlf")
    assert to_bytes(n) == raw
    for a, b in zip(m.thickness_params() + m.color_params(), n.thickness_params() + n.color_params()):
        assert np.array_equal(a, b) and a.dtype == b.dtype
    assert n.adam_thickness.step == 7 and np.all(n.adam_color.m[2] == 0.25)
    assert n.octree.config == m.octree.config
    assert np.array_equal(n.octree.leaf_corners, m.octree.leaf_corners)
    cam = make_camera(look_at([1.5, -1, 1.2], [0.5, 0.5, 0.5]), 16)
    assert np.array_equal(render_image(m, cam).rgb, render_image(n, cam).rgb)


def test_checkpoint_errors():
    raw = to_bytes(trained_like_model())
    with pytest.raises(CheckpointError):
        from_bytes(b"NOTSVLF!" + raw[8:])
    with pytest.raises(CheckpointError):
        from_bytes(raw[:-100])


def test_empty_octree_checkpoint():
    m = SVLFModel.init(SparseOctree.empty(GridConfig(8)), seed=0)
    n = from_bytes(to_bytes(m))
    assert n.octree.n_leaves == 0 and n.thickness_features.data.shape == (0, 64)
