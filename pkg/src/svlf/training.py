"""Depth-supervised three-stage training.

Stage 1 supervises the voxel that contains the ground-truth surface hit of
each ray (surface rendering). Stage 2 trains optical thickness through the
composited ray color with the color group frozen. Stage 3 unfreezes
everything at a lower learning rate.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import save_checkpoint
from .dataset import Frame, SceneDataset, backproject
from .decoders import adam_step
from .metrics import psnr
from .model import Grads, SVLFModel
from .octree import (
    GridConfig,
    HitBatch,
    Ray,
    RayVoxelHit,
    SparseOctree,
    build_octree,
    locate_batch,
    traverse_batch,
)
from .parallel import blas_single_thread, map_ordered, resolve_threads
from .rendering import (
    HitGeometry,
    backward_hits,
    composite_backward,
    composite_batch,
    forward_hits,
    hit_geometry,
    render_image,
)

log = logging.getLogger(__name__)

# rays per work unit; fixed so results do not depend on the worker count
RAY_CHUNK = 4096
SURFACE_TOL = 1e-6


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass
class TrainConfig:
    epochs: tuple[int, int, int] = (100, 150, 50)
    lr: float = 1e-3
    lr_ft: float = 2e-4
    lambda_eta: float = 1.0
    lambda_tau: float = 0.01
    lambda_empty: float = 0.01
    lambda_alpha: float = 0.1
    image_size: int = 400
    seed: int = 0
    val_every: int = 1

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        if len(self.epochs) != 3 or min(self.epochs) < 0:
            raise TrainingError("epochs must be three non-negative integers")
        if self.lr <= 0 or self.lr_ft <= 0:
            raise TrainingError("learning rates must be positive")
        if min(self.lambda_eta, self.lambda_tau, self.lambda_empty, self.lambda_alpha) < 0:
            raise TrainingError("loss weights must be non-negative")
        if self.image_size < 1:
            raise TrainingError("image_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = list(self.epochs)
        return d


@dataclass
class RaySupervision:
    ray: Ray
    c_gt: np.ndarray
    depth_gt: float
    alpha_gt: int

    def __post_init__(self):
        if (self.depth_gt > 0) != (self.alpha_gt == 1):
            raise TrainingError("depth_gt > 0 iff alpha_gt = 1")


# --------------------------------------------------------------------------
# per-ray targets


def eta_gt(hit: RayVoxelHit, depth_gt: float, ray: Ray) -> float:
    """Within-voxel depth of the true surface: 1 at entry, 0 at exit."""
    if depth_gt < hit.t_in - SURFACE_TOL or depth_gt > hit.t_out + SURFACE_TOL:
        raise TrainingError("surface point is not inside the hit voxel")
    eta = (hit.t_out - depth_gt) / (hit.t_out - hit.t_in)
    return float(min(1.0, max(0.0, eta)))


def _eta_gt_batch(t_in, t_out, depth):
    return np.clip((t_out - depth) / (t_out - t_in), 0.0, 1.0)


# --------------------------------------------------------------------------
# precomputed ray chunks


@dataclass
class RayChunk:
    """Static supervision + geometry for a fixed set of rays."""

    n_rays: int
    c_gt: np.ndarray          # (R, 3) float64
    alpha_gt: np.ndarray      # (R,) float64
    geom: HitGeometry         # all hits, for volumetric losses
    surf_hit: np.ndarray      # (R,) index into geom of the surface voxel, -1 if none
    eta_gt: np.ndarray        # (R,) valid where surf_hit >= 0
    surf_geom: HitGeometry    # surface hits only (foreground rays)
    surf_ray: np.ndarray      # ray id of each surface hit
    empty_geom: HitGeometry   # hits strictly in front of the surface (all hits for background rays)

    @property
    def n_surface(self) -> int:
        return self.surf_geom.n


def build_chunk(octree: SparseOctree, origins, dirs, c_gt, depth, alpha, dtype) -> RayChunk:
    origins = np.asarray(origins, np.float64)
    dirs = np.asarray(dirs, np.float64)
    depth = np.asarray(depth, np.float64)
    alpha = np.asarray(alpha, np.float64)
    R = len(origins)
    hits = traverse_batch(octree, origins, dirs)
    geom = hit_geometry(octree, origins, dirs, hits, dtype)

    fg = alpha > 0.5
    xs = origins + depth[:, None] * dirs
    located = np.where(fg, locate_batch(octree, xs), -1)
    ray = hits.ray
    d_h = depth[ray]
    match = (hits.leaf == located[ray]) & fg[ray]
    contains = fg[ray] & (hits.t_in - SURFACE_TOL <= d_h) & (d_h <= hits.t_out + SURFACE_TOL)
    surf_hit = np.full(R, -1, np.int64)
    hit_ids = np.arange(hits.n_hits)
    # first matching hit per ray; the interval test is the fallback when the
    # located voxel is not on the hit list (boundary round-off)
    for cand in (match & contains, contains):
        idx = hit_ids[cand]
        rays_with, first_pos = np.unique(ray[idx], return_index=True)
        first = np.full(R, -1, np.int64)
        first[rays_with] = idx[first_pos]
        surf_hit = np.where(surf_hit >= 0, surf_hit, first)
    n_missing = int((fg & (surf_hit < 0)).sum())
    if n_missing:
        log.debug("%d foreground rays without a surface voxel were skipped", n_missing)

    eta = np.zeros(R)
    ok = surf_hit >= 0
    eta[ok] = _eta_gt_batch(hits.t_in[surf_hit[ok]], hits.t_out[surf_hit[ok]], depth[ok])

    surf_idx = np.sort(surf_hit[ok])
    surf_geom = geom.take(surf_idx)
    surf_ray = ray[surf_idx]

    # empty supervision: in front of the surface hit, or every hit of a background ray
    pos_in_ray = hit_ids - hits.offsets[ray]
    surf_pos = np.where(ok, surf_hit - hits.offsets[:-1], np.iinfo(np.int64).max)
    before = np.where(fg[ray], pos_in_ray < surf_pos[ray], True)
    before &= fg[ray] & ok[ray] | ~fg[ray]
    empty_geom = geom.take(hit_ids[before])
    return RayChunk(R, np.asarray(c_gt, np.float64), alpha, geom, surf_hit, eta,
                    surf_geom, surf_ray, empty_geom)


def frame_rays(frame: Frame, stride: int = 1):
    """Subsampled pixel rays of a frame with their supervision."""
    cam = frame.camera
    rows = np.arange(stride // 2, cam.height, stride)
    cols = np.arange(stride // 2, cam.width, stride)
    o, d = cam.pixel_rays(rows, cols)
    rgb = frame.rgb[np.ix_(rows, cols)].reshape(-1, 3).astype(np.float64)
    mask = frame.mask[np.ix_(rows, cols)].ravel()
    depth = np.where(mask, frame.depth[np.ix_(rows, cols)].ravel().astype(np.float64), 0.0)
    mask = mask & (depth > 0)
    return o, d, rgb, depth, mask.astype(np.float64)


@dataclass
class TrainImage:
    name: str
    n_rays: int
    chunks: list[RayChunk]

    @property
    def n_surface(self) -> int:
        return sum(c.n_surface for c in self.chunks)


def prepare_image(octree, frame: Frame, stride: int, dtype) -> TrainImage:
    o, d, rgb, depth, alpha = frame_rays(frame, stride)
    chunks = []
    for s in range(0, len(o), RAY_CHUNK):
        sl = slice(s, s + RAY_CHUNK)
        chunks.append(build_chunk(octree, o[sl], d[sl], rgb[sl], depth[sl], alpha[sl], dtype))
    return TrainImage(frame.name, len(o), chunks)


# --------------------------------------------------------------------------
# losses on a chunk


def chunk_surface_loss(model: SVLFModel, ch: RayChunk, cfg: TrainConfig, norm: float,
                       grads: Grads) -> float:
    """Surface-voxel loss (stage 1); gradients added to ``grads``."""
    loss = 0.0
    dt = model.dtype
    if ch.surf_geom.n:
        cache = forward_hits(model, ch.surf_geom)
        tau = cache.tau.astype(np.float64)
        eta = cache.eta.astype(np.float64)
        col = cache.color.astype(np.float64)
        r = ch.surf_ray
        dc = col - ch.c_gt[r]
        de = eta - ch.eta_gt[r]
        et = np.exp(-tau)
        loss += float((dc**2).sum() + cfg.lambda_eta * (de**2).sum()
                      + cfg.lambda_tau * (et**2).sum())
        backward_hits(
            model, ch.surf_geom, cache,
            d_tau=(-2.0 * cfg.lambda_tau * et * et / norm).astype(dt),
            d_eta=(2.0 * cfg.lambda_eta * de / norm).astype(dt),
            d_color=(2.0 * dc / norm).astype(dt),
            grads=grads,
        )
    if cfg.lambda_empty > 0 and ch.empty_geom.n:
        cache = forward_hits(model, ch.empty_geom, with_color=False)
        tau = cache.tau.astype(np.float64)
        et = np.exp(-tau)
        a = 1.0 - et
        loss += float(cfg.lambda_empty * (a**2).sum())
        backward_hits(
            model, ch.empty_geom, cache,
            d_tau=(2.0 * cfg.lambda_empty * a * et / norm).astype(dt),
            d_eta=None, d_color=None, grads=grads, color_frozen=True,
        )
    return loss / norm


def chunk_volumetric_loss(model: SVLFModel, ch: RayChunk, cfg: TrainConfig, norm: float,
                          grads: Grads, color_frozen: bool) -> float:
    """Composited photometric + alpha + surface-eta loss (stages 2-3)."""
    g = ch.geom
    hits = g.hits
    if g.n == 0:
        return float((ch.c_gt**2).sum() + cfg.lambda_alpha * (ch.alpha_gt**2).sum()) / norm
    cache = forward_hits(model, g)
    comp = composite_batch(hits, cache.tau, cache.color)
    dc = comp.color - ch.c_gt
    da = comp.alpha - ch.alpha_gt
    loss = float((dc**2).sum() + cfg.lambda_alpha * (da**2).sum())
    d_tau, d_color = composite_backward(
        hits, cache.tau, cache.color, comp, 2.0 * dc / norm, 2.0 * cfg.lambda_alpha * da / norm
    )
    d_eta = np.zeros(g.n)
    ok = ch.surf_hit >= 0
    if cfg.lambda_eta > 0 and ok.any():
        s = ch.surf_hit[ok]
        de = cache.eta[s].astype(np.float64) - ch.eta_gt[ok]
        loss += float(cfg.lambda_eta * (de**2).sum())
        d_eta[s] += 2.0 * cfg.lambda_eta * de / norm
    dt = model.dtype
    backward_hits(model, g, cache, d_tau.astype(dt), d_eta.astype(dt), d_color.astype(dt),
                  grads, color_frozen=color_frozen)
    return loss / norm


def image_step_grads(model, image: TrainImage, cfg: TrainConfig, stage: int,
                     threads: int = 1) -> tuple[float, Grads]:
    """Loss and gradient for one image, reduced over chunks in order."""
    if stage == 1:
        norm = float(max(image.n_surface, 1))

        def work(ch):
            gr = model.new_grads()
            return chunk_surface_loss(model, ch, cfg, norm, gr), gr
    else:
        norm = float(image.n_rays)

        def work(ch):
            gr = model.new_grads()
            return chunk_volumetric_loss(model, ch, cfg, norm, gr, color_frozen=(stage == 2)), gr

    parts = map_ordered(work, image.chunks, threads)
    total = model.new_grads()
    loss = 0.0
    for l_, gr in parts:
        loss += l_
        total.add(gr)
    return loss, total


# --------------------------------------------------------------------------
# single-ray API


def _sup_chunk(model, sup: RaySupervision) -> RayChunk:
    return build_chunk(
        model.octree, sup.ray.origin[None], sup.ray.direction[None],
        np.asarray(sup.c_gt, float)[None], np.array([float(sup.depth_gt)]),
        np.array([float(sup.alpha_gt)]), model.dtype,
    )


def surface_loss(ray_sup: RaySupervision, model: SVLFModel,
                 cfg: TrainConfig | None = None) -> tuple[float, Grads]:
    """Stage-1 loss for one foreground ray; returns (loss, gradients).

    Raises if the ray's surface voxel is not found.
    """
    cfg = cfg or TrainConfig()
    ch = _sup_chunk(model, ray_sup)
    if ch.n_surface == 0:
        raise TrainingError("surface voxel not found")
    grads = model.new_grads()
    return chunk_surface_loss(model, ch, cfg, 1.0, grads), grads


def volumetric_loss(ray_sup: RaySupervision, model: SVLFModel, color_frozen: bool,
                    cfg: TrainConfig | None = None) -> tuple[float, Grads]:
    cfg = cfg or TrainConfig()
    ch = _sup_chunk(model, ray_sup)
    grads = model.new_grads()
    return chunk_volumetric_loss(model, ch, cfg, 1.0, grads, color_frozen), grads


# --------------------------------------------------------------------------
# the training loop


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    loss: float
    val_psnr: float
    wall: float

    def line(self, wall: bool = True) -> str:
        s = f"{self.stage}\t{self.epoch}\t{self.loss:.6g}\t{self.val_psnr:.4f}"
        return f"{s}\t{self.wall:.2f}" if wall else s


@dataclass
class TrainResult:
    model: SVLFModel
    history: list[EpochRecord] = field(default_factory=list)
    checkpoints: dict[str, Path] = field(default_factory=dict)
    skipped_rays: int = 0


def octree_from_dataset(dataset: SceneDataset, grid: GridConfig) -> SparseOctree:
    pts = [backproject(f) for f in dataset.split("train")]
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    return build_octree(pts, grid)


def train_stride(dataset: SceneDataset, image_size: int) -> int:
    res = dataset.resolution[0]
    size = min(image_size, res)
    if res % size:
        raise TrainingError(f"train image size {size} must divide dataset resolution {res}")
    return res // size


def validation_psnr(model: SVLFModel, frames: list[Frame], threads: int = 1) -> float:
    if not frames:
        return float("nan")
    vals = [psnr(render_image(model, f.camera, threads=threads).rgb, f.rgb) for f in frames]
    return float(np.mean(vals))


def train(
    config: TrainConfig,
    dataset: SceneDataset,
    grid: GridConfig | None = None,
    out_dir=None,
    octree: SparseOctree | None = None,
    threads: int | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Run the three stages; writes stage checkpoints when ``out_dir`` is set."""
    threads = resolve_threads(threads)
    train_frames = dataset.split("train")
    if not train_frames:
        raise TrainingError("dataset has no training frames")
    grid = grid or GridConfig()
    if octree is None:
        octree = octree_from_dataset(dataset, grid)
    model = SVLFModel.init(octree, seed=config.seed)
    stride = train_stride(dataset, config.image_size)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)
    logf = open(out / "train.log", "w") if out is not None else None

    with blas_single_thread():
        images = [prepare_image(octree, f, stride, model.dtype) for f in train_frames]
    result.skipped_rays = sum(
        int(((c.alpha_gt > 0.5) & (c.surf_hit < 0)).sum()) for im in images for c in im.chunks
    )
    if result.skipped_rays:
        log.warning("%d foreground rays have no surface voxel and are skipped in stage 1",
                    result.skipped_rays)
    val_frames = dataset.split("val")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    t_start = time.perf_counter()

    def checkpoint(name):
        if out is not None:
            path = out / f"{name}.svlf"
            save_checkpoint(path, model)
            result.checkpoints[name] = path

    try:
        for stage, n_epochs in zip((1, 2, 3), config.epochs):
            lr = config.lr_ft if stage == 3 else config.lr
            for epoch in range(n_epochs):
                order = rng.permutation(len(images))
                losses = []
                with blas_single_thread():
                    for i in order:
                        loss, grads = image_step_grads(model, images[i], config, stage, threads)
                        losses.append(loss)
                        model.zero_grad()
                        model.add_grads(grads)
                        adam_step(model.adam_thickness, model.thickness_params(),
                                  model.thickness_grads(), lr)
                        if stage != 2:
                            adam_step(model.adam_color, model.color_params(),
                                      model.color_grads(), lr)
                mean_loss = float(np.mean(losses))
                vp = float("nan")
                if val_frames and config.val_every and (epoch + 1) % config.val_every == 0:
                    vp = validation_psnr(model, val_frames, threads)
                rec = EpochRecord(stage, epoch, mean_loss, vp, time.perf_counter() - t_start)
                result.history.append(rec)
                if logf:
                    logf.write(rec.line() + "\n")
                    logf.flush()
                if on_epoch:
                    on_epoch(rec)
                if not math.isfinite(mean_loss):
                    if out is not None:
                        checkpoint("diverged")
                    raise TrainingDiverged(
                        f"non-finite loss at stage {stage} epoch {epoch}"
                    )
            checkpoint(f"stage{stage}")
        model.zero_grad()
        checkpoint("final")
    finally:
        if logf:
            logf.close()
    return result
