"""Analytic ray caster for procedural sphere/box scenes.

Produces exact RGB, depth and mask ground truth, and is the geometric
oracle used by the tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, look_at, make_camera

SCENE_CENTER = np.array([0.5, 0.5, 0.5])
SHADOW_OFFSET = 1e-6
FREE_INFLATE = 0.05


class SceneError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def to_dict(self):
        return {"type": "sphere", "center": list(map(float, self.center)),
                "radius": float(self.radius), "albedo": list(map(float, self.albedo))}


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray

    @property
    def center(self):
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    def to_dict(self):
        return {"type": "box", "min": list(map(float, self.lo)), "max": list(map(float, self.hi)),
                "albedo": list(map(float, self.albedo))}


@dataclass(eq=False)
class AnalyticScene:
    primitives: list = field(default_factory=list)
    light_dir: np.ndarray = field(default_factory=lambda: np.array([-0.3, -0.4, -0.866]))
    light_rgb: np.ndarray = field(default_factory=lambda: np.array([0.75, 0.75, 0.75]))
    ambient: np.ndarray = field(default_factory=lambda: np.array([0.25, 0.25, 0.25]))
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, float) / np.linalg.norm(self.light_dir)
        self.light_rgb = np.asarray(self.light_rgb, float)
        self.ambient = np.asarray(self.ambient, float)
        self.background = np.asarray(self.background, float)
        if np.any(self.ambient + self.light_rgb > 1.0 + 1e-12):
            raise SceneError("ambient + direct light must stay <= 1 per channel")
        for p in self.primitives:
            lo, hi = _bounds(p)
            if np.any(lo < 0) or np.any(hi > 1):
                raise SceneError("primitives must lie inside the unit cube")

    def to_dict(self) -> dict:
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "light_dir": list(map(float, self.light_dir)),
            "light_rgb": list(map(float, self.light_rgb)),
            "ambient": list(map(float, self.ambient)),
            "background": list(map(float, self.background)),
        }

    @classmethod
    def from_dict(cls, d) -> "AnalyticScene":
        prims = []
        for p in d["primitives"]:
            if p["type"] == "sphere":
                prims.append(Sphere(np.array(p["center"]), p["radius"], np.array(p["albedo"])))
            else:
                prims.append(Box(np.array(p["min"]), np.array(p["max"]), np.array(p["albedo"])))
        return cls(prims, np.array(d["light_dir"]), np.array(d["light_rgb"]),
                   np.array(d["ambient"]), np.array(d["background"]))


def _bounds(p):
    if isinstance(p, Sphere):
        return np.asarray(p.center) - p.radius, np.asarray(p.center) + p.radius
    return np.asarray(p.lo), np.asarray(p.hi)


def random_scene(seed: int, n_primitives: int | None = None) -> AnalyticScene:
    """3-6 random spheres/boxes in the middle of the unit cube."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n = int(rng.integers(3, 7)) if n_primitives is None else n_primitives
    prims = []
    for _ in range(n):
        albedo = rng.uniform(0.25, 1.0, 3)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.16)
            c = rng.uniform(0.2 + r, 0.8 - r, 3)
            prims.append(Sphere(c, r, albedo))
        else:
            half = rng.uniform(0.05, 0.13, 3)
            c = rng.uniform(0.2 + half, 0.8 - half)
            prims.append(Box(c - half, c + half, albedo))
    return AnalyticScene(prims)


# --------------------------------------------------------------------------
# ray casting


def _sphere_hits(o, d, sph):
    oc = o - sph.center
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - sph.radius ** 2
    disc = b * b - c
    ok = disc >= 0
    s = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - s, -b + s
    t = np.where(t0 > 0, t0, t1)
    ok &= t > 0
    p = o + np.where(ok, t, 0.0)[:, None] * d
    t = np.where(ok, t, np.inf)
    n = np.where(ok[:, None], (p - sph.center) / sph.radius, 0.0)
    return t, n


def _box_hits(o, d, box):
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - o) / d
        tb = (hi - o) / d
    zero = d == 0
    inside = (o >= lo) & (o <= hi)
    near = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    far = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    tn, tf = near.max(1), far.min(1)
    ok = (tf >= tn) & (tf > 0)
    from_inside = tn <= 0
    t = np.where(from_inside, tf, tn)
    t = np.where(ok, t, np.inf)
    axis = np.where(from_inside, far.argmin(1), near.argmax(1))
    n = np.zeros_like(o)
    rows = np.arange(len(o))
    n[rows, axis] = np.where(from_inside, 1.0, -1.0) * np.sign(d[rows, axis])
    n[~ok] = 0.0
    return t, n


def raycast_batch(scene: AnalyticScene, origins, dirs):
    """Nearest hit per ray: (t, normal, albedo, primitive index); t = inf on miss."""
    o = np.asarray(origins, float).reshape(-1, 3)
    d = np.asarray(dirs, float).reshape(-1, 3)
    n_rays = len(o)
    best_t = np.full(n_rays, np.inf)
    best_n = np.zeros((n_rays, 3))
    best_i = np.full(n_rays, -1)
    for i, p in enumerate(scene.primitives):
        t, n = _sphere_hits(o, d, p) if isinstance(p, Sphere) else _box_hits(o, d, p)
        closer = t < best_t
        best_t[closer], best_n[closer], best_i[closer] = t[closer], n[closer], i
    albedo = np.zeros((n_rays, 3))
    hit = best_i >= 0
    if scene.primitives:
        alb = np.array([p.albedo for p in scene.primitives], float)
        albedo[hit] = alb[best_i[hit]]
    return best_t, best_n, albedo, best_i


def raycast(scene: AnalyticScene, ray):
    """Nearest positive-t hit as (t, point, normal, albedo), or None."""
    t, n, a, i = raycast_batch(scene, ray.origin[None], ray.direction[None])
    if i[0] < 0:
        return None
    return float(t[0]), ray.origin + t[0] * ray.direction, n[0], a[0]


def shade_batch(scene: AnalyticScene, points, normals, albedo):
    """Lambertian with hard shadows, clamped to [0, 1]."""
    L = -scene.light_dir
    ndotl = np.maximum(0.0, normals @ L)
    so = points + SHADOW_OFFSET * normals
    st, _, _, _ = raycast_batch(scene, so, np.broadcast_to(L, so.shape))
    lit = np.isinf(st) & (ndotl > 0)
    light = scene.ambient[None] + scene.light_rgb[None] * (ndotl * lit)[:, None]
    return np.clip(albedo * light, 0.0, 1.0)


def shade(scene: AnalyticScene, hit):
    """Shade a hit returned by :func:`raycast`."""
    _, point, normal, albedo = hit
    return shade_batch(scene, point[None], normal[None], albedo[None])[0]


def render_gt(scene: AnalyticScene, camera: Camera):
    """Ground-truth (rgb, depth, mask) images for a camera."""
    o, d = camera.pixel_rays()
    t, n, albedo, idx = raycast_batch(scene, o, d)
    hit = idx >= 0
    rgb = np.tile(scene.background, (len(o), 1))
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        rgb[hit] = shade_batch(scene, p, n[hit], albedo[hit])
    depth = np.where(hit, t, 0.0)
    H, W = camera.height, camera.width
    return rgb.reshape(H, W, 3), depth.reshape(H, W), hit.reshape(H, W)


def signed_distance(scene: AnalyticScene, points) -> np.ndarray:
    """Signed distance to the nearest primitive surface."""
    p = np.asarray(points, float).reshape(-1, 3)
    best = np.full(len(p), np.inf)
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            sd = np.linalg.norm(p - prim.center, axis=1) - prim.radius
        else:
            c, h = prim.center, 0.5 * (np.asarray(prim.hi) - np.asarray(prim.lo))
            q = np.abs(p - c) - h
            sd = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(1), 0)
        best = np.where(np.abs(sd) < np.abs(best), sd, best)
    return best


def inside_inflated(scene: AnalyticScene, points, margin: float = FREE_INFLATE) -> np.ndarray:
    p = np.asarray(points, float).reshape(-1, 3)
    out = np.zeros(len(p), bool)
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            out |= np.linalg.norm(p - prim.center, axis=1) < prim.radius + margin
        else:
            out |= np.all((p > np.asarray(prim.lo) - margin) & (p < np.asarray(prim.hi) + margin), 1)
    return out


# --------------------------------------------------------------------------
# cameras


def sample_hemisphere_cameras(n: int, radius: float = 1.6, seed: int = 0,
                              resolution: int = 64, fov_deg: float = 40.0) -> list[Camera]:
    """Cameras on the upper hemisphere (z >= center) looking at the scene center."""
    rng = np.random.Generator(np.random.PCG64(seed))
    cams = []
    for _ in range(n):
        z = rng.uniform(0.0, 1.0)
        phi = rng.uniform(0.0, 2 * np.pi)
        s = np.sqrt(1.0 - z * z)
        eye = SCENE_CENTER + radius * np.array([s * np.cos(phi), s * np.sin(phi), z])
        cams.append(make_camera(look_at(eye, SCENE_CENTER), resolution, fov_deg))
    return cams


def sample_free_cameras(n: int, seed: int = 0, scene: AnalyticScene | None = None,
                        resolution: int = 64, fov_deg: float = 60.0) -> list[Camera]:
    """Cameras anywhere in the unit cube, outside inflated primitives."""
    rng = np.random.Generator(np.random.PCG64(seed))
    scene = scene or AnalyticScene()
    targets = [p.center for p in scene.primitives] or [SCENE_CENTER]
    cams = []
    while len(cams) < n:
        eye = rng.uniform(0.0, 1.0, 3)
        if scene.primitives and inside_inflated(scene, eye[None])[0]:
            continue
        target = np.asarray(targets[int(rng.integers(len(targets)))], float)
        if np.linalg.norm(target - eye) < 1e-6:
            continue
        cams.append(make_camera(look_at(eye, target), resolution, fov_deg))
    return cams


def default_split(n: int) -> tuple[int, int, int]:
    """train/val/test counts: 2/3 train, 1/15 val (>= 1 once n >= 3), rest test."""
    if n < 1:
        raise SceneError("views must be >= 1")
    train = max(1, int(round(2 * n / 3)))
    val = min(max(1, int(round(n / 15))), n - train) if n >= 3 else 0
    return train, val, n - train - val


def generate_dataset(scene: AnalyticScene, cameras: list[Camera], out_path,
                     split: tuple[int, int, int] | None = None):
    """Render every camera and write the dataset to ``out_path``."""
    from .dataset import Frame, SceneDataset

    split = split or default_split(len(cameras))
    if sum(split) != len(cameras):
        raise SceneError("split counts must add up to the number of views")
    names = ["train"] * split[0] + ["val"] * split[1] + ["test"] * split[2]
    frames = []
    for i, (cam, sp) in enumerate(zip(cameras, names)):
        rgb, depth, mask = render_gt(scene, cam)
        frames.append(Frame(f"{i:05d}", sp, cam, rgb, depth, mask))
    ds = SceneDataset(frames, scene=scene)
    ds.save(Path(out_path))
    return ds
