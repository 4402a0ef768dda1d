"""Sparse voxel octree: occupancy, Morton codes, ray-box tests and traversal.

All geometry here is float64. Leaves are identified by their Morton code at
the finest level; bit ``k`` of x/y/z goes to bit ``3k``/``3k+1``/``3k+2``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# Keep a hit only if its segment is longer than this (grazing rays).
GRAZE_EPS = 1e-12

# Unit-cube corner offsets ordered by corner code (bz << 2) | (by << 1) | bx.
CORNER_OFFSETS = np.array(
    [[(b >> 0) & 1, (b >> 1) & 1, (b >> 2) & 1] for b in range(8)], dtype=np.int64
)


class OctreeError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    resolution: int = 128
    scene_aabb: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.0, 0.0, 0.0),
        (1.0, 1.0, 1.0),
    )
    dilation: int = 1

    def __post_init__(self):
        r = self.resolution
        if r < 2 or r & (r - 1):
            raise OctreeError(f"resolution must be a power of two >= 2, got {r}")
        lo, hi = np.asarray(self.scene_aabb[0], float), np.asarray(self.scene_aabb[1], float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise OctreeError("scene_aabb must have strictly positive extent on all axes")
        if self.dilation < 0:
            raise OctreeError("dilation must be non-negative")
        # normalise to plain float tuples so equality/serialisation is stable
        object.__setattr__(
            self, "scene_aabb", (tuple(float(v) for v in lo), tuple(float(v) for v in hi))
        )

    @property
    def max_level(self) -> int:
        return int(self.resolution).bit_length() - 1

    @property
    def aabb_min(self) -> np.ndarray:
        return np.array(self.scene_aabb[0], dtype=np.float64)

    @property
    def aabb_max(self) -> np.ndarray:
        return np.array(self.scene_aabb[1], dtype=np.float64)

    def cell_size(self, level: int | None = None) -> np.ndarray:
        level = self.max_level if level is None else level
        return (self.aabb_max - self.aabb_min) / float(2**level)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "scene_aabb": [list(self.scene_aabb[0]), list(self.scene_aabb[1])],
            "dilation": self.dilation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        aabb = d.get("scene_aabb", [[0, 0, 0], [1, 1, 1]])
        return cls(
            resolution=int(d.get("resolution", 128)),
            scene_aabb=(tuple(aabb[0]), tuple(aabb[1])),
            dilation=int(d.get("dilation", 1)),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise OctreeError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @classmethod
    def towards(cls, origin, direction) -> "Ray":
        d = np.asarray(direction, dtype=np.float64)
        return cls(origin, d / np.linalg.norm(d))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class RayVoxelHit:
    voxel_id: int
    t_in: float
    t_out: float
    x1: np.ndarray
    x2: np.ndarray


# --------------------------------------------------------------------------
# Morton codes


_U = np.uint64
_M = [_U(m) for m in (0x1FFFFF, 0x1F00000000FFFF, 0x1F0000FF0000FF, 0x100F00F00F00F00F,
                      0x10C30C30C30C30C3, 0x1249249249249249)]
_SHIFTS = [_U(s) for s in (32, 16, 8, 4, 2)]


def _part1by2(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & _M[0]
    for s, m in zip(_SHIFTS, _M[1:]):
        v = (v | (v << s)) & m
    return v


def _compact1by2(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & _M[5]
    for s, m in zip(_SHIFTS[::-1], _M[4::-1]):
        v = (v ^ (v >> s)) & m
    return v


def morton_encode(cells) -> np.ndarray:
    """Encode integer cell coordinates (..., 3) into Morton codes (int64)."""
    c = np.asarray(cells, dtype=np.int64)
    code = _part1by2(c[..., 0]) | (_part1by2(c[..., 1]) << np.uint64(1)) | (
        _part1by2(c[..., 2]) << np.uint64(2)
    )
    return code.astype(np.int64)


def morton_decode(codes) -> np.ndarray:
    c = np.asarray(codes, dtype=np.int64).astype(np.uint64)
    return np.stack(
        [_compact1by2(c), _compact1by2(c >> np.uint64(1)), _compact1by2(c >> np.uint64(2))],
        axis=-1,
    ).astype(np.int64)


# --------------------------------------------------------------------------
# Octree


@dataclass(eq=False)
class SparseOctree:
    """Immutable multi-level occupancy with a shared corner-vertex index.

    ``levels[l]`` holds the sorted Morton codes of occupied cells at level
    ``l`` (level 0 is the root). ``leaf_corners[i]`` holds the 8 vertex ids
    of leaf ``levels[-1][i]`` in corner-code order.
    """

    config: GridConfig
    levels: list[np.ndarray]
    leaf_cells: np.ndarray
    leaf_corners: np.ndarray
    vertex_keys: np.ndarray
    n_dropped: int = 0
    _leaf_lo: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self._leaf_lo = self.cell_lo(self.leaf_cells)

    @classmethod
    def from_leaf_codes(cls, codes, config: GridConfig, n_dropped: int = 0) -> "SparseOctree":
        leaves = np.unique(np.asarray(codes, dtype=np.int64))
        L = config.max_level
        levels = [None] * (L + 1)
        levels[L] = leaves
        for level in range(L - 1, -1, -1):
            levels[level] = np.unique(levels[level + 1] >> 3)
        cells = morton_decode(leaves).reshape(-1, 3)
        n = config.resolution + 1
        corners = cells[:, None, :] + CORNER_OFFSETS[None, :, :]
        keys = corners[..., 0] + n * (corners[..., 1] + n * corners[..., 2])
        vertex_keys, inverse = np.unique(keys.ravel(), return_inverse=True)
        leaf_corners = inverse.reshape(-1, 8).astype(np.int64)
        return cls(config, levels, cells, leaf_corners, vertex_keys, n_dropped)

    @classmethod
    def empty(cls, config: GridConfig) -> "SparseOctree":
        return cls.from_leaf_codes(np.zeros(0, dtype=np.int64), config)

    @property
    def leaves(self) -> np.ndarray:
        return self.levels[-1]

    @property
    def n_leaves(self) -> int:
        return len(self.levels[-1])

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_keys)

    def cell_lo(self, cells, level: int | None = None) -> np.ndarray:
        level = self.config.max_level if level is None else level
        h = self.config.cell_size(level)
        return self.config.aabb_min + np.asarray(cells, dtype=np.int64) * h

    def cell_hi(self, cells, level: int | None = None) -> np.ndarray:
        level = self.config.max_level if level is None else level
        h = self.config.cell_size(level)
        return self.config.aabb_min + (np.asarray(cells, dtype=np.int64) + 1) * h

    def leaf_index(self, voxel_id) -> np.ndarray:
        """Map leaf Morton codes to row indices; -1 where not occupied."""
        codes = np.asarray(voxel_id, dtype=np.int64)
        leaves = self.leaves
        pos = np.searchsorted(leaves, codes)
        pos_c = np.minimum(pos, max(len(leaves) - 1, 0))
        found = (len(leaves) > 0) & (pos < len(leaves))
        found = found & (leaves[pos_c] == codes) if len(leaves) else np.zeros(codes.shape, bool)
        return np.where(found, pos_c, -1)

    def _require_leaf(self, voxel_id) -> int:
        idx = int(self.leaf_index(voxel_id))
        if idx < 0:
            raise OctreeError(f"unknown voxel id {voxel_id}")
        return idx

    def voxel_aabb(self, voxel_id) -> tuple[np.ndarray, np.ndarray]:
        idx = self._require_leaf(voxel_id)
        cell = self.leaf_cells[idx]
        return self.cell_lo(cell), self.cell_hi(cell)

    def is_occupied(self, codes, level: int) -> np.ndarray:
        arr = self.levels[level]
        codes = np.asarray(codes, dtype=np.int64)
        if len(arr) == 0:
            return np.zeros(codes.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(arr, codes), len(arr) - 1)
        return arr[pos] == codes


def quantize(points, config: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return (cells, inside-mask) under the half-open cell convention.

    Points on the max face of the scene box map to the last cell.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo, hi = config.aabb_min, config.aabb_max
    inside = np.all((p >= lo) & (p <= hi), axis=1)
    cells = np.floor((p - lo) / config.cell_size()).astype(np.int64)
    cells = np.clip(cells, 0, config.resolution - 1)
    return cells, inside


def build_octree(points, config: GridConfig) -> SparseOctree:
    """Occupy the cells containing ``points`` and dilate them (Chebyshev)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise OctreeError("empty occupancy")
    cells, inside = quantize(p, config)
    n_dropped = int((~inside).sum())
    if n_dropped:
        log.warning("build_octree: dropped %d points outside the scene box", n_dropped)
    cells = np.unique(cells[inside], axis=0)
    if len(cells) == 0:
        raise OctreeError("empty occupancy")
    d = config.dilation
    if d > 0:
        r = np.arange(-d, d + 1)
        offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
        cells = (cells[:, None, :] + offs[None]).reshape(-1, 3)
        keep = np.all((cells >= 0) & (cells < config.resolution), axis=1)
        cells = np.unique(cells[keep], axis=0)
    return SparseOctree.from_leaf_codes(morton_encode(cells), config, n_dropped)


def locate(octree: SparseOctree, point) -> int | None:
    """Morton code of the occupied leaf containing ``point``, else ``None``."""
    cells, inside = quantize(point, octree.config)
    if not inside[0]:
        return None
    code = int(morton_encode(cells[0]))
    return code if octree.leaf_index(code) >= 0 else None


def locate_batch(octree: SparseOctree, points) -> np.ndarray:
    """Leaf row index for each point (-1 if outside or unoccupied)."""
    cells, inside = quantize(points, octree.config)
    idx = octree.leaf_index(morton_encode(cells))
    return np.where(inside, idx, -1)


def corner_vertices(octree: SparseOctree, voxel_id) -> np.ndarray:
    return octree.leaf_corners[octree._require_leaf(voxel_id)].copy()


# --------------------------------------------------------------------------
# Ray-box intersection


def ray_aabb(ray: Ray, aabb) -> tuple[float, float] | None:
    """Slab test. Returns the parametric overlap clipped to t >= 0, or None."""
    lo, hi = aabb
    tnear, tfar = -math.inf, math.inf
    for a in range(3):
        o, d = float(ray.origin[a]), float(ray.direction[a])
        l, h = float(lo[a]), float(hi[a])
        if d == 0.0:
            if o < l or o > h:
                return None
            continue
        ta, tb = (l - o) / d, (h - o) / d
        tnear = max(tnear, min(ta, tb))
        tfar = min(tfar, max(ta, tb))
    t0 = max(tnear, 0.0)
    if tfar < t0:
        return None
    return t0, tfar


def ray_aabb_batch(origins, dirs, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised slab test; returns (t0, t1) with t0 clipped at 0.

    An empty overlap shows up as ``t1 < t0``. Arithmetic matches
    :func:`ray_aabb` operation for operation.
    """
    o, d = origins, dirs
    zero = d == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - o) / d
        tb = (hi - o) / d
    near = np.minimum(ta, tb)
    far = np.maximum(ta, tb)
    inside = (o >= lo) & (o <= hi)
    near = np.where(zero, np.where(inside, -np.inf, np.inf), near)
    far = np.where(zero, np.where(inside, np.inf, -np.inf), far)
    t0 = np.maximum(near.max(axis=-1), 0.0)
    t1 = far.min(axis=-1)
    return t0, t1


# --------------------------------------------------------------------------
# Traversal


@dataclass
class HitBatch:
    """Flat ray-voxel hits grouped per ray (CSR layout).

    Hits of ray ``r`` occupy ``offsets[r]:offsets[r+1]`` sorted by
    ascending ``t_in`` with Morton-code tie breaking.
    """

    n_rays: int
    ray: np.ndarray
    leaf: np.ndarray
    code: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray
    offsets: np.ndarray

    @property
    def n_hits(self) -> int:
        return len(self.leaf)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def select(self, mask) -> "HitBatch":
        """Keep a subset of hits (order preserved)."""
        mask = np.asarray(mask, bool)
        ray = self.ray[mask]
        offsets = np.zeros(self.n_rays + 1, dtype=np.int64)
        np.cumsum(np.bincount(ray, minlength=self.n_rays), out=offsets[1:])
        return HitBatch(
            self.n_rays, ray, self.leaf[mask], self.code[mask],
            self.t_in[mask], self.t_out[mask], offsets,
        )


def traverse_batch(octree: SparseOctree, origins, dirs, chunk: int = 4096) -> HitBatch:
    """Hierarchical ray-octree intersection for many rays.

    Children are only tested against rays that hit their parent's box.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    parts = []
    for s in range(0, n, chunk):
        parts.append(_traverse_chunk(octree, origins[s:s + chunk], dirs[s:s + chunk], s))
    if parts:
        ray = np.concatenate([p[0] for p in parts])
        code = np.concatenate([p[1] for p in parts])
        t_in = np.concatenate([p[2] for p in parts])
        t_out = np.concatenate([p[3] for p in parts])
    else:
        ray = code = np.zeros(0, np.int64)
        t_in = t_out = np.zeros(0)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(ray, minlength=n), out=offsets[1:])
    leaf = octree.leaf_index(code)
    return HitBatch(n, ray, leaf, code, t_in, t_out, offsets)


_CHILD = np.arange(8, dtype=np.int64)
_CHILD_OFFSET = np.stack([_CHILD & 1, (_CHILD >> 1) & 1, _CHILD >> 2], axis=-1)


def _traverse_chunk(octree, origins, dirs, base):
    L = octree.config.max_level
    empty = (np.zeros(0, np.int64),) * 2 + (np.zeros(0),) * 2
    if octree.n_leaves == 0 or len(origins) == 0:
        return empty
    ray = np.arange(len(origins), dtype=np.int64)
    code = np.zeros(len(origins), dtype=np.int64)
    cells = np.zeros((len(origins), 3), dtype=np.int64)
    for level in range(L + 1):
        lo = octree.cell_lo(cells, level)
        hi = octree.cell_hi(cells, level)
        t0, t1 = ray_aabb_batch(origins[ray], dirs[ray], lo, hi)
        if level < L:
            keep = t1 >= t0
        else:
            keep = (t1 - t0) > GRAZE_EPS
        ray, code, cells, t0, t1 = ray[keep], code[keep], cells[keep], t0[keep], t1[keep]
        if level == L or len(ray) == 0:
            break
        child = (code[:, None] << 3) | _CHILD[None, :]
        occ = octree.is_occupied(child, level + 1)
        sel = np.nonzero(occ)
        ray, code = ray[sel[0]], child[sel]
        cells = 2 * cells[sel[0]] + _CHILD_OFFSET[sel[1]]
    if len(ray) == 0:
        return empty
    order = np.lexsort((code, t0, ray))
    return ray[order] + base, code[order], t0[order], t1[order]


def traverse(octree: SparseOctree, ray: Ray) -> list[RayVoxelHit]:
    hits = traverse_batch(octree, ray.origin[None], ray.direction[None])
    return [
        RayVoxelHit(int(c), float(a), float(b), ray.at(a), ray.at(b))
        for c, a, b in zip(hits.code, hits.t_in, hits.t_out)
    ]
