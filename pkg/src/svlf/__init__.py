"""Sparse voxel light fields: a per-voxel neural light field on a sparse octree.

Each occupied leaf voxel stores learned features at its corners. For a ray
crossing a voxel, a thickness decoder predicts an optical thickness and a
surface position along the chord, and a color decoder predicts the color there.
Samples from all voxels along the ray are alpha composited front to back.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import depth_errors, psnr, ssim
from .model import SVLFModel
from .octree import GridConfig, Ray, SparseOctree, build_octree, traverse
from .rendering import render_image, render_ray
from .training import TrainConfig, train

__all__ = [
    "GridConfig", "Ray", "SparseOctree", "build_octree", "traverse", "SVLFModel",
    "render_ray", "render_image", "TrainConfig", "train", "psnr", "ssim", "depth_errors",
    "save_checkpoint", "load_checkpoint",
]
__version__ = "0.1.0"
