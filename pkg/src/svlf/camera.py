"""Pinhole camera with a camera-to-world pose (x right, y down, z forward)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CameraError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        R = pose[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise CameraError("camera rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise CameraError("zero-size image")
        object.__setattr__(self, "pose", pose)

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def intrinsics(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    def with_pose(self, pose) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, pose, self.width, self.height)

    def pixel_rays(self, rows=None, cols=None) -> tuple[np.ndarray, np.ndarray]:
        """Unit rays through pixel centres, row-major over (rows, cols)."""
        rows = np.arange(self.height) if rows is None else np.asarray(rows)
        cols = np.arange(self.width) if cols is None else np.asarray(cols)
        v, u = np.meshgrid(rows + 0.5, cols + 0.5, indexing="ij")
        d_cam = np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1
        ).reshape(-1, 3)
        d = d_cam @ self.pose[:3, :3].T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.pose[:3, 3], d.shape).copy()
        return o, d


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from ``eye`` at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, eye
    return pose


def make_camera(pose, resolution: int, fov_deg: float = 40.0) -> Camera:
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    c = resolution / 2.0
    return Camera(f, f, c, c, pose, resolution, resolution)
