"""Per-vertex learnable embeddings and trilinear interpolation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .octree import CORNER_OFFSETS, SparseOctree

# tolerance for "point inside voxel" checks, scene units
INSIDE_TOL = 1e-7


class FeatureError(ValueError):
    pass


@dataclass(eq=False)
class FeatureVolume:
    data: np.ndarray
    grad: np.ndarray

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_array(cls, data) -> "FeatureVolume":
        data = np.ascontiguousarray(data)
        return cls(data, np.zeros_like(data))

    def astype(self, dtype) -> "FeatureVolume":
        return FeatureVolume.from_array(self.data.astype(dtype))

    def zero_grad(self):
        self.grad[...] = 0


def init_features(vertex_count: int, dim: int, seed, dtype=np.float32) -> FeatureVolume:
    """Uniform init on [-1/sqrt(dim), 1/sqrt(dim)] from a PCG64 generator."""
    if vertex_count < 1 or dim < 1:
        raise FeatureError("vertex_count and dim must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    bound = 1.0 / np.sqrt(dim)
    data = rng.uniform(-bound, bound, size=(vertex_count, dim)).astype(dtype)
    return FeatureVolume.from_array(data)


# --------------------------------------------------------------------------
# weights


def trilinear_weights(u) -> np.ndarray:
    """Weights (..., 8) for local coordinates u in [0,1]^3, corner-code order."""
    u = np.asarray(u, dtype=np.float64)
    b = CORNER_OFFSETS
    f = np.where(b == 1, u[..., None, :], 1.0 - u[..., None, :])
    return f.prod(axis=-1)


def trilinear_weight_grads(u) -> np.ndarray:
    """d w_j / d u_a as (..., 8, 3)."""
    u = np.asarray(u, dtype=np.float64)
    uu = u[..., None, :]
    b = CORNER_OFFSETS
    f = np.where(b == 1, uu, 1.0 - uu)  # (..., 8, 3)
    s = np.where(b == 1, 1.0, -1.0)
    out = np.empty(f.shape)
    out[..., 0] = s[:, 0] * f[..., 1] * f[..., 2]
    out[..., 1] = f[..., 0] * s[:, 1] * f[..., 2]
    out[..., 2] = f[..., 0] * f[..., 1] * s[:, 2]
    return out


def local_coords(octree: SparseOctree, leaf, points, check: bool = True) -> np.ndarray:
    """Points mapped to [0,1]^3 in the frame of their leaf voxel."""
    leaf = np.asarray(leaf)
    lo = octree._leaf_lo[leaf]
    h = octree.config.cell_size()
    u = (np.asarray(points, dtype=np.float64) - lo) / h
    if check:
        tol = INSIDE_TOL / h
        if np.any(u < -tol) or np.any(u > 1.0 + tol):
            raise FeatureError("point not in voxel")
    return np.clip(u, 0.0, 1.0)


def interp_matrix(corners, weights, n_vertices: int, dtype) -> sp.csr_matrix:
    """Sparse (N, V) matrix with one row of 8 trilinear weights per sample."""
    n = len(corners)
    indptr = np.arange(0, 8 * n + 1, 8, dtype=np.int64)
    return sp.csr_matrix(
        (np.asarray(weights, dtype=dtype).ravel(), np.asarray(corners).ravel(), indptr),
        shape=(n, n_vertices),
    )


# --------------------------------------------------------------------------
# single-point API


def _leaf_and_u(volume, octree, voxel_id, point):
    idx = octree._require_leaf(voxel_id)
    if volume.n_vertices != octree.n_vertices:
        raise FeatureError("feature volume does not match octree vertex count")
    u = local_coords(octree, idx, np.asarray(point, dtype=np.float64).reshape(3))
    return idx, u


def interpolate(volume: FeatureVolume, octree: SparseOctree, voxel_id, point) -> np.ndarray:
    idx, u = _leaf_and_u(volume, octree, voxel_id, point)
    w = trilinear_weights(u).reshape(8)
    z = volume.data[octree.leaf_corners[idx]]
    return (w.astype(volume.data.dtype)[:, None] * z).sum(axis=0)


def interpolate_backward(volume: FeatureVolume, octree: SparseOctree, voxel_id, point, upstream):
    """Accumulate ``w_j * upstream`` into the corner gradient rows.

    Returns the positional Jacobian d z / d point, shape (dim, 3).
    """
    idx, u = _leaf_and_u(volume, octree, voxel_id, point)
    g = np.asarray(upstream, dtype=volume.data.dtype).reshape(volume.dim)
    corners = octree.leaf_corners[idx]
    w = trilinear_weights(u).reshape(8)
    for j in range(8):
        volume.grad[corners[j]] += w[j].astype(volume.data.dtype) * g
    dw = trilinear_weight_grads(u).reshape(8, 3) / octree.config.cell_size()
    return volume.data[corners].T.astype(np.float64) @ dw
