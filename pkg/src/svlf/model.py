"""The SVLF model container: octree, two feature volumes, two decoders."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoders import AdamState, DecoderParams, MlpSpec, color_spec, thickness_spec
from .features import FeatureVolume, init_features
from .octree import SparseOctree

THICKNESS_DIM = 64
COLOR_DIM = 32
HIDDEN_DIM = 128


@dataclass(eq=False)
class SVLFModel:
    octree: SparseOctree
    thickness_features: FeatureVolume
    color_features: FeatureVolume
    thickness: DecoderParams
    color: DecoderParams
    adam_thickness: AdamState = field(default=None)
    adam_color: AdamState = field(default=None)

    def __post_init__(self):
        if self.adam_thickness is None:
            self.adam_thickness = AdamState.like(self.thickness_params())
        if self.adam_color is None:
            self.adam_color = AdamState.like(self.color_params())

    @classmethod
    def init(
        cls,
        octree: SparseOctree,
        seed: int = 0,
        thickness_dim: int = THICKNESS_DIM,
        color_dim: int = COLOR_DIM,
        hidden_dim: int = HIDDEN_DIM,
        dtype=np.float32,
    ) -> "SVLFModel":
        seeds = np.random.SeedSequence(seed).generate_state(4, dtype=np.uint64)
        V = octree.n_vertices
        if V:
            zt = init_features(V, thickness_dim, int(seeds[0]), dtype)
            zc = init_features(V, color_dim, int(seeds[1]), dtype)
        else:
            zt = FeatureVolume.from_array(np.zeros((0, thickness_dim), dtype))
            zc = FeatureVolume.from_array(np.zeros((0, color_dim), dtype))
        ft = DecoderParams.init(thickness_spec(thickness_dim, hidden_dim), int(seeds[2]), dtype)
        fc = DecoderParams.init(color_spec(color_dim, hidden_dim), int(seeds[3]), dtype)
        return cls(octree, zt, zc, ft, fc)

    @property
    def dtype(self):
        return self.thickness.dtype

    # parameter groups: thickness = (Z^T, f_T), color = (Z^C, f_C)
    def thickness_params(self) -> list[np.ndarray]:
        return [self.thickness_features.data] + self.thickness.arrays()

    def color_params(self) -> list[np.ndarray]:
        return [self.color_features.data] + self.color.arrays()

    def thickness_grads(self) -> list[np.ndarray]:
        return [self.thickness_features.grad] + self.thickness.grads()

    def color_grads(self) -> list[np.ndarray]:
        return [self.color_features.grad] + self.color.grads()

    def new_grads(self) -> "Grads":
        return Grads(
            [np.zeros_like(p) for p in self.thickness_params()],
            [np.zeros_like(p) for p in self.color_params()],
        )

    def zero_grad(self):
        for g in self.thickness_grads() + self.color_grads():
            g[...] = 0

    def add_grads(self, grads: "Grads"):
        for dst, src in zip(self.thickness_grads(), grads.thickness):
            dst += src
        for dst, src in zip(self.color_grads(), grads.color):
            dst += src

    def astype(self, dtype) -> "SVLFModel":
        """Copy with parameters cast to ``dtype`` (fresh optimiser state)."""
        return SVLFModel(
            self.octree,
            self.thickness_features.astype(dtype),
            self.color_features.astype(dtype),
            self.thickness.astype(dtype),
            self.color.astype(dtype),
        )

    def copy(self) -> "SVLFModel":
        m = SVLFModel(
            self.octree,
            self.thickness_features.astype(self.dtype),
            self.color_features.astype(self.dtype),
            self.thickness.astype(self.dtype),
            self.color.astype(self.dtype),
        )
        for src, dst in ((self.adam_thickness, m.adam_thickness), (self.adam_color, m.adam_color)):
            dst.step = src.step
            for a, b in zip(src.m + src.v, dst.m + dst.v):
                b[...] = a
        return m

    @property
    def specs(self) -> tuple[MlpSpec, MlpSpec]:
        return self.thickness.spec, self.color.spec


@dataclass
class Grads:
    """Gradient buffers laid out like the model's two parameter groups."""

    thickness: list[np.ndarray]
    color: list[np.ndarray]

    @property
    def zT(self):
        return self.thickness[0]

    @property
    def zC(self):
        return self.color[0]

    @property
    def fT(self):
        return self.thickness[1:]

    @property
    def fC(self):
        return self.color[1:]

    def add(self, other: "Grads"):
        for a, b in zip(self.thickness + self.color, other.thickness + other.color):
            a += b
