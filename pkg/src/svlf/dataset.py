"""On-disk scene format.

    <scene>/scene.json       resolution, intrinsics, frames[{name, split, camera_to_world}]
    <scene>/rgb_%05d.png     8-bit RGB
    <scene>/depth_%05d.f32   b"PFMX" + u32 width + u32 height + u32 channels, float32 LE rows
    <scene>/mask_%05d.png    8-bit, 0/255
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera

DEPTH_MAGIC = b"PFMX"
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------------
# raw image IO


def write_png(path, img):
    """Write a float image in [0,1] (H,W) or (H,W,3) as 8-bit PNG."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(a * 255.0).astype(np.uint8)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8).astype(np.float32) / 255.0


def write_depth(path, depth):
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise DatasetError("depth must be a 2-D array")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC + struct.pack("<III", w, h, 1))
        f.write(d.tobytes(order="C"))


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC:
        raise DatasetError(f"{path}: bad depth magic")
    w, h, c = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != w * h * c:
        raise DatasetError(f"{path}: truncated depth file")
    return data.reshape(h, w).astype(np.float32)


# --------------------------------------------------------------------------


@dataclass(eq=False)
class Frame:
    name: str
    split: str
    camera: Camera
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray


@dataclass(eq=False)
class SceneDataset:
    frames: list[Frame]
    scene: object | None = None
    root: Path | None = None

    def split(self, name: str) -> list[Frame]:
        return [f for f in self.frames if f.split == name]

    @property
    def resolution(self) -> tuple[int, int]:
        c = self.frames[0].camera
        return c.width, c.height

    def save(self, root: Path):
        root = Path(root)
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DatasetError(f"cannot write dataset to {root}: {e}") from e
        if not self.frames:
            raise DatasetError("dataset has no frames")
        cam0 = self.frames[0].camera
        manifest = {
            "resolution": [cam0.width, cam0.height],
            "intrinsics": cam0.intrinsics(),
            "frames": [],
        }
        for i, fr in enumerate(self.frames):
            write_png(root / f"rgb_{i:05d}.png", fr.rgb)
            write_png(root / f"mask_{i:05d}.png", fr.mask.astype(np.float64))
            write_depth(root / f"depth_{i:05d}.f32", np.where(fr.mask, fr.depth, 0.0))
            manifest["frames"].append({
                "name": fr.name,
                "split": fr.split,
                "camera_to_world": [float(v) for v in fr.camera.pose.ravel()],
            })
        if self.scene is not None:
            manifest["scene"] = self.scene.to_dict()
        (root / "scene.json").write_text(json.dumps(manifest, indent=1) + "\n")
        self.root = root

    @classmethod
    def load(cls, root) -> "SceneDataset":
        root = Path(root)
        mpath = root / "scene.json"
        if not mpath.is_file():
            raise DatasetError(f"no scene.json in {root}")
        m = json.loads(mpath.read_text())
        w, h = m["resolution"]
        k = m["intrinsics"]
        frames = []
        for i, f in enumerate(m["frames"]):
            if f["split"] not in SPLITS:
                raise DatasetError(f"unknown split {f['split']!r}")
            cam = Camera(k["fx"], k["fy"], k["cx"], k["cy"],
                         np.array(f["camera_to_world"], float).reshape(4, 4), w, h)
            rgb = read_png(root / f"rgb_{i:05d}.png")[..., :3]
            depth = read_depth(root / f"depth_{i:05d}.f32")
            mask = read_png(root / f"mask_{i:05d}.png") > 0.5
            frames.append(Frame(f["name"], f["split"], cam, rgb, depth, mask))
        scene = None
        if "scene" in m:
            from .scenegen import AnalyticScene
            scene = AnalyticScene.from_dict(m["scene"])
        return cls(frames, scene, root)


def backproject(frame: Frame) -> np.ndarray:
    """World points of every foreground depth pixel."""
    o, d = frame.camera.pixel_rays()
    m = frame.mask.ravel() & (frame.depth.ravel() > 0)
    return o[m] + frame.depth.ravel()[m, None].astype(np.float64) * d[m]
