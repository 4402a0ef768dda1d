"""Voxel light-field evaluation and alpha compositing.

The batched path (:class:`HitGeometry`, :func:`forward_hits`,
:func:`backward_hits`, :func:`composite_batch`) is what rendering and
training run on; the single-ray functions wrap it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .camera import Camera
from .decoders import MlpCache
from .features import interp_matrix, local_coords, trilinear_weight_grads, trilinear_weights
from .model import Grads, SVLFModel
from .octree import HitBatch, Ray, RayVoxelHit, SparseOctree, traverse_batch
from .parallel import blas_single_thread, map_ordered

BACKGROUND = np.zeros(3)
ALPHA_DEPTH_MIN = 1e-4
TANGENT_EPS = 1e-14
RENDER_CHUNK = 4096


class RenderError(ValueError):
    pass


# --------------------------------------------------------------------------
# ray parameterisation


@dataclass(frozen=True)
class RayParam6:
    p1: np.ndarray
    p2: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p1, self.p2])


def _sphere_chord(origins, dirs, centers, radius):
    oc = origins - centers
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    return oc, b, b * b - c


def parameterize_ray(ray: Ray, aabb) -> RayParam6:
    """Normalised entry/exit points on the voxel's bounding sphere."""
    lo, hi = (np.asarray(a, dtype=np.float64) for a in aabb)
    center = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo))
    oc, b, disc = _sphere_chord(ray.origin[None], ray.direction[None], center[None], radius)
    if disc[0] < TANGENT_EPS:
        raise RenderError("tangent ray")
    s = math.sqrt(disc[0])
    p1 = (oc[0] + (-b[0] - s) * ray.direction) / radius
    p2 = (oc[0] + (-b[0] + s) * ray.direction) / radius
    return RayParam6(p1, p2)


def parameterize_batch(origins, dirs, centers, radius: float) -> np.ndarray:
    """(N, 6) parameterisation; tangent chords collapse to the tangent point."""
    oc, b, disc = _sphere_chord(origins, dirs, centers, radius)
    s = np.sqrt(np.maximum(disc, 0.0))[:, None]
    p1 = (oc + (-b[:, None] - s) * dirs) / radius
    p2 = (oc + (-b[:, None] + s) * dirs) / radius
    return np.concatenate([p1, p2], axis=1)


# --------------------------------------------------------------------------
# static per-hit geometry


@dataclass
class HitGeometry:
    """Everything about a set of ray-voxel hits that does not depend on weights."""

    hits: HitBatch
    r6: np.ndarray        # (H, 6) model dtype
    u1: np.ndarray        # (H, 3) local coords of entry point
    u2: np.ndarray        # (H, 3) local coords of exit point
    corners: np.ndarray   # (H, 8) vertex ids
    m1: sp.csr_matrix     # interpolation at x1
    m2: sp.csr_matrix     # interpolation at x2

    @property
    def n(self) -> int:
        return len(self.corners)

    def take(self, idx) -> "HitGeometry":
        idx = np.asarray(idx, dtype=np.int64)
        mask = np.zeros(self.n, bool)
        mask[idx] = True
        if not np.all(np.diff(idx) > 0):
            raise ValueError("take() expects strictly increasing indices")
        return HitGeometry(
            self.hits.select(mask), self.r6[idx], self.u1[idx], self.u2[idx],
            self.corners[idx], self.m1[idx], self.m2[idx],
        )


def hit_geometry(octree: SparseOctree, origins, dirs, hits: HitBatch, dtype) -> HitGeometry:
    o = origins[hits.ray]
    d = dirs[hits.ray]
    x1 = o + hits.t_in[:, None] * d
    x2 = o + hits.t_out[:, None] * d
    h = octree.config.cell_size()
    lo = octree._leaf_lo[hits.leaf]
    centers = lo + 0.5 * h
    radius = 0.5 * float(np.linalg.norm(h))
    r6 = parameterize_batch(o, d, centers, radius).astype(dtype)
    u1 = local_coords(octree, hits.leaf, x1, check=False)
    u2 = local_coords(octree, hits.leaf, x2, check=False)
    corners = octree.leaf_corners[hits.leaf]
    V = octree.n_vertices
    m1 = interp_matrix(corners, trilinear_weights(u1), V, dtype)
    m2 = interp_matrix(corners, trilinear_weights(u2), V, dtype)
    return HitGeometry(hits, r6, u1, u2, corners, m1, m2)


# --------------------------------------------------------------------------
# batched voxel evaluation


@dataclass
class HitCache:
    tau: np.ndarray
    eta: np.ndarray
    color: np.ndarray | None
    us: np.ndarray | None
    ms: sp.csr_matrix | None
    zc: np.ndarray | None
    cache_t: MlpCache
    cache_c: MlpCache | None


def forward_hits(model: SVLFModel, geom: HitGeometry, with_color: bool = True) -> HitCache:
    """One thickness query (and one color query) per hit."""
    zt = model.thickness_features.data
    x = np.concatenate([geom.r6, geom.m1 @ zt, geom.m2 @ zt], axis=1)
    out_t, cache_t = model.thickness.forward(x)
    tau, eta = out_t[:, 0], out_t[:, 1]
    if not with_color:
        return HitCache(tau, eta, None, None, None, None, cache_t, None)
    e = eta.astype(np.float64)[:, None]
    us = e * geom.u1 + (1.0 - e) * geom.u2
    ms = interp_matrix(geom.corners, trilinear_weights(us), model.octree.n_vertices, model.dtype)
    zc = ms @ model.color_features.data
    color, cache_c = model.color.forward(np.concatenate([geom.r6, zc], axis=1))
    return HitCache(tau, eta, color, us, ms, zc, cache_t, cache_c)


def backward_hits(
    model: SVLFModel,
    geom: HitGeometry,
    cache: HitCache,
    d_tau,
    d_eta,
    d_color,
    grads: Grads,
    color_frozen: bool = False,
):
    """Back-propagate per-hit d loss / d (tau, eta, color) into ``grads``.

    The color path reaches eta through the surface point, so eta receives
    gradient from the color loss even when the color group is frozen.
    """
    dt = model.dtype
    d_eta = np.zeros(geom.n, dt) if d_eta is None else np.asarray(d_eta, dt).copy()
    if d_color is not None and cache.color is not None:
        gx = model.color.backward(
            cache.cache_c, d_color, grads=False if color_frozen else grads.fC
        )
        dzc = gx[:, 6:]
        if not color_frozen:
            grads.zC[...] += cache.ms.T @ dzc
        # d z_c / d eta = sum_j (d w_j / d u . (u1 - u2)) z_j
        dw = trilinear_weight_grads(cache.us)
        ddir = np.einsum("hja,ha->hj", dw, geom.u1 - geom.u2)
        mdir = interp_matrix(geom.corners, ddir, model.octree.n_vertices, dt)
        dz_deta = mdir @ model.color_features.data
        d_eta += np.einsum("hd,hd->h", dzc, dz_deta)
    up = np.zeros((geom.n, 2), dt)
    if d_tau is not None:
        up[:, 0] = d_tau
    up[:, 1] = d_eta
    gx = model.thickness.backward(cache.cache_t, up, grads=grads.fT)
    D = model.thickness_features.dim
    grads.zT[...] += geom.m1.T @ gx[:, 6:6 + D]
    grads.zT[...] += geom.m2.T @ gx[:, 6 + D:]


# --------------------------------------------------------------------------
# compositing


@dataclass
class CompositeResult:
    color: np.ndarray      # (R, 3)
    alpha: np.ndarray      # (R,)
    weights: np.ndarray    # (H,)
    trans: np.ndarray      # (H,) transmittance before each hit
    depth: np.ndarray      # (R,)


def _padded_index(hits: HitBatch):
    counts = hits.counts()
    k = int(counts.max()) if len(counts) and hits.n_hits else 0
    pos = np.arange(hits.n_hits) - hits.offsets[hits.ray]
    return pos, k


def composite_batch(hits: HitBatch, tau, color, t_surface=None) -> CompositeResult:
    """Front-to-back compositing of per-hit (tau, color) for every ray."""
    R = hits.n_rays
    tau = np.asarray(tau, np.float64)
    if np.any(tau < 0):
        raise RenderError("negative optical thickness")
    pos, k = _padded_index(hits)
    e_pad = np.ones((R, max(k, 1)))
    e_pad[hits.ray, pos] = np.exp(-tau)
    T_pad = np.ones_like(e_pad)
    if k > 1:
        T_pad[:, 1:] = np.cumprod(e_pad[:, :-1], axis=1)
    trans = T_pad[hits.ray, pos]
    w = trans * (1.0 - np.exp(-tau))
    out = np.zeros((R, 3))
    alpha = 1.0 - (T_pad[:, -1] * e_pad[:, -1])
    if hits.n_hits:
        col = np.asarray(color, np.float64)
        for ch in range(3):
            out[:, ch] = np.bincount(hits.ray, w * col[:, ch], minlength=R)
    depth = np.zeros(R)
    if t_surface is not None and hits.n_hits:
        wsum = np.bincount(hits.ray, w, minlength=R)
        wt = np.bincount(hits.ray, w * t_surface, minlength=R)
        ok = alpha > ALPHA_DEPTH_MIN
        depth[ok] = wt[ok] / wsum[ok]
    return CompositeResult(out, alpha, w, trans, depth)


def composite_backward(hits: HitBatch, tau, color, comp: CompositeResult, g_color, g_alpha):
    """d loss / d tau and d loss / d color per hit, given per-ray upstreams."""
    tau = np.asarray(tau, np.float64)
    col = np.asarray(color, np.float64)
    g_color = np.asarray(g_color, np.float64)
    g_alpha = np.zeros(hits.n_rays) if g_alpha is None else np.asarray(g_alpha, np.float64)
    s = np.einsum("hc,hc->h", col, g_color[hits.ray]) + g_alpha[hits.ray]
    ws = comp.weights * s
    # suffix sum over later hits on the same ray
    pos, k = _padded_index(hits)
    pad = np.zeros((hits.n_rays, max(k, 1)))
    pad[hits.ray, pos] = ws
    suffix = np.cumsum(pad[:, ::-1], axis=1)[:, ::-1] - pad
    later = suffix[hits.ray, pos]
    d_tau = comp.trans * np.exp(-tau) * s - later
    d_color = comp.weights[:, None] * g_color[hits.ray]
    return d_tau, d_color


def composite(samples):
    """Composite an ordered list of (tau, color) pairs.

    Returns (color, alpha, weights).
    """
    taus = np.array([float(t) for t, _ in samples], dtype=np.float64)
    if np.any(taus < 0):
        raise RenderError("negative optical thickness")
    cols = np.array([np.asarray(c, float) for _, c in samples]).reshape(-1, 3)
    T = 1.0
    weights = np.empty(len(taus))
    color = np.zeros(3)
    for i, (t, c) in enumerate(zip(taus, cols)):
        e = math.exp(-t)
        weights[i] = T * (1.0 - e)
        color += weights[i] * c
        T *= e
    return color, 1.0 - T, weights


# --------------------------------------------------------------------------
# single voxel / single ray API


@dataclass
class VoxelSample:
    tau: float
    eta: float
    x_s: np.ndarray
    color: np.ndarray
    voxel_id: int
    t_in: float
    t_out: float


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: float
    expected_depth: float
    samples: list[VoxelSample]


def _single_ray_geometry(model, ray: Ray, hits: list[RayVoxelHit]) -> HitGeometry:
    octree = model.octree
    codes = np.array([h.voxel_id for h in hits], dtype=np.int64)
    leaf = octree.leaf_index(codes)
    if np.any(leaf < 0):
        raise RenderError("hit references an unoccupied voxel")
    n = len(hits)
    hb = HitBatch(
        1, np.zeros(n, np.int64), leaf, codes,
        np.array([h.t_in for h in hits], float), np.array([h.t_out for h in hits], float),
        np.array([0, n], np.int64),
    )
    return hit_geometry(octree, ray.origin[None], ray.direction[None], hb, model.dtype)


def _samples(geom: HitGeometry, cache: HitCache, ray: Ray) -> list[VoxelSample]:
    out = []
    for i in range(geom.n):
        t_in, t_out = geom.hits.t_in[i], geom.hits.t_out[i]
        e = float(cache.eta[i])
        x1, x2 = ray.at(t_in), ray.at(t_out)
        out.append(VoxelSample(
            float(cache.tau[i]), e, e * x1 + (1 - e) * x2, cache.color[i].astype(np.float64),
            int(geom.hits.code[i]), float(t_in), float(t_out),
        ))
    return out


def evaluate_voxel(hit: RayVoxelHit, ray: Ray, model: SVLFModel) -> VoxelSample:
    geom = _single_ray_geometry(model, ray, [hit])
    cache = forward_hits(model, geom)
    return _samples(geom, cache, ray)[0]


def render_ray(model: SVLFModel, ray: Ray) -> RenderOutput:
    hits = traverse_batch(model.octree, ray.origin[None], ray.direction[None])
    geom = hit_geometry(model.octree, ray.origin[None], ray.direction[None], hits, model.dtype)
    cache = forward_hits(model, geom)
    ts = cache.eta * hits.t_in + (1 - cache.eta) * hits.t_out
    comp = composite_batch(hits, cache.tau, cache.color, ts)
    return RenderOutput(
        comp.color[0], float(comp.alpha[0]), float(comp.depth[0]), _samples(geom, cache, ray)
    )


# --------------------------------------------------------------------------
# image rendering


@dataclass
class Frame:
    rgb: np.ndarray     # (H, W, 3) float
    alpha: np.ndarray   # (H, W)
    depth: np.ndarray   # (H, W), 0 where nothing was hit
    n_queries: int
    n_hits: int
    hits_per_ray: np.ndarray  # (H*W,) traversal length


def render_rays(model: SVLFModel, origins, dirs):
    """Render a ray batch; returns (rgb, alpha, depth, counts, n_queries)."""
    octree = model.octree
    hits = traverse_batch(octree, origins, dirs)
    n = len(origins)
    if hits.n_hits == 0:
        return np.tile(BACKGROUND, (n, 1)), np.zeros(n), np.zeros(n), hits.counts(), 0
    geom = hit_geometry(octree, origins, dirs, hits, model.dtype)
    cache = forward_hits(model, geom)
    ts = cache.eta.astype(np.float64) * hits.t_in + (1 - cache.eta.astype(np.float64)) * hits.t_out
    comp = composite_batch(hits, cache.tau, cache.color, ts)
    rgb = comp.color + (1.0 - comp.alpha)[:, None] * BACKGROUND
    return rgb, comp.alpha, comp.depth, hits.counts(), geom.n


def render_image(model: SVLFModel, camera: Camera, width: int | None = None,
                 height: int | None = None, threads: int = 1) -> Frame:
    """One primary ray per pixel centre. Output is independent of ``threads``."""
    width = camera.width if width is None else width
    height = camera.height if height is None else height
    if width < 1 or height < 1:
        raise RenderError("zero-size image")
    if (width, height) != (camera.width, camera.height):
        sx, sy = width / camera.width, height / camera.height
        camera = Camera(camera.fx * sx, camera.fy * sy, camera.cx * sx, camera.cy * sy,
                        camera.pose, width, height)
    o, d = camera.pixel_rays()
    chunks = [(o[s:s + RENDER_CHUNK], d[s:s + RENDER_CHUNK]) for s in range(0, len(o), RENDER_CHUNK)]
    with blas_single_thread():
        parts = map_ordered(lambda c: render_rays(model, *c), chunks, threads)
    rgb = np.concatenate([p[0] for p in parts])
    alpha = np.concatenate([p[1] for p in parts])
    depth = np.concatenate([p[2] for p in parts])
    counts = np.concatenate([p[3] for p in parts])
    nq = sum(p[4] for p in parts)
    return Frame(
        rgb.reshape(height, width, 3), alpha.reshape(height, width), depth.reshape(height, width),
        int(nq), int(counts.sum()), counts,
    )
