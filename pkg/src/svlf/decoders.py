"""Small ReLU decoders with hand-written backprop, and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

THICKNESS_HEADS = ("relu", "sigmoid")
COLOR_HEADS = ("sigmoid", "sigmoid", "sigmoid")


class DecoderError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dim: int
    hidden_layers: int
    output_dim: int
    heads: tuple[str, ...]

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.hidden_layers, self.output_dim) < 1:
            raise DecoderError("all MLP dims must be >= 1")
        if len(self.heads) != self.output_dim:
            raise DecoderError("one head activation per output")
        if any(h not in ("relu", "sigmoid", "identity") for h in self.heads):
            raise DecoderError(f"unknown head activation in {self.heads}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_dim] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "hidden_layers": self.hidden_layers,
            "output_dim": self.output_dim,
            "heads": list(self.heads),
        }

    @classmethod
    def from_dict(cls, d) -> "MlpSpec":
        return cls(d["input_dim"], d["hidden_dim"], d["hidden_layers"], d["output_dim"],
                   tuple(d["heads"]))


def thickness_spec(feature_dim: int = 64, hidden_dim: int = 128) -> MlpSpec:
    return MlpSpec(6 + 2 * feature_dim, hidden_dim, 1, 2, THICKNESS_HEADS)


def color_spec(feature_dim: int = 32, hidden_dim: int = 128) -> MlpSpec:
    return MlpSpec(6 + feature_dim, hidden_dim, 3, 3, COLOR_HEADS)


def _sigmoid(x):
    # split form avoids overflow warnings for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class MlpCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    out: np.ndarray


@dataclass(eq=False)
class DecoderParams:
    """Weights W[i] of shape (fan_in, fan_out), biases b[i], and grad buffers."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    weight_grads: list[np.ndarray] = field(default=None)
    bias_grads: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        for (fi, fo), W, b in zip(self.spec.layer_dims, self.weights, self.biases):
            if W.shape != (fi, fo) or b.shape != (fo,):
                raise DecoderError("parameter shapes do not match the MlpSpec")
        if self.weight_grads is None:
            self.weight_grads = [np.zeros_like(W) for W in self.weights]
            self.bias_grads = [np.zeros_like(b) for b in self.biases]

    @classmethod
    def init(cls, spec: MlpSpec, seed, dtype=np.float32) -> "DecoderParams":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.Generator(np.random.PCG64(seed))
        Ws, bs = [], []
        for fi, fo in spec.layer_dims:
            a = np.sqrt(6.0 / (fi + fo))
            Ws.append(rng.uniform(-a, a, size=(fi, fo)).astype(dtype))
            bs.append(np.zeros(fo, dtype=dtype))
        return cls(spec, Ws, bs)

    @classmethod
    def zeros(cls, spec: MlpSpec, dtype=np.float32) -> "DecoderParams":
        return cls(spec, [np.zeros(s, dtype) for s in spec.layer_dims],
                   [np.zeros(fo, dtype) for _, fo in spec.layer_dims])

    @property
    def dtype(self):
        return self.weights[0].dtype

    def astype(self, dtype) -> "DecoderParams":
        return DecoderParams(self.spec, [W.astype(dtype) for W in self.weights],
                             [b.astype(dtype) for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def grads(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weight_grads, self.bias_grads):
            out += [W, b]
        return out

    def zero_grad(self):
        for g in self.grads():
            g[...] = 0

    # -- forward / backward ------------------------------------------------

    def forward(self, x) -> tuple[np.ndarray, MlpCache]:
        """Batched forward pass; returns head-activated outputs and the cache."""
        h = np.asarray(x, dtype=self.dtype)
        if h.ndim != 2 or h.shape[1] != self.spec.input_dim:
            raise DecoderError(f"expected input (N, {self.spec.input_dim}), got {h.shape}")
        inputs, pres = [], []
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = h @ W
            a += b
            pres.append(a)
            h = np.maximum(a, 0) if i < n - 1 else a
        out = np.empty_like(h)
        for k, head in enumerate(self.spec.heads):
            col = h[:, k]
            if head == "relu":
                out[:, k] = np.maximum(col, 0)
            elif head == "sigmoid":
                out[:, k] = _sigmoid(col)
            else:
                out[:, k] = col
        return out, MlpCache(inputs, pres, out)

    def backward(self, cache: MlpCache | None, upstream, grads=None, input_grad: bool = True):
        """Reverse pass for d loss / d outputs = ``upstream``.

        Parameter gradients are added into ``grads`` (a list in
        :meth:`grads` order) or into this object's buffers; pass
        ``grads=False`` to skip them. Returns d loss / d input.
        """
        if cache is None:
            raise DecoderError("backward called without a forward cache")
        g = np.asarray(upstream, dtype=self.dtype).copy()
        last = cache.pre[-1]
        for k, head in enumerate(self.spec.heads):
            if head == "relu":
                g[:, k] *= last[:, k] > 0
            elif head == "sigmoid":
                s = cache.out[:, k]
                g[:, k] *= s * (1 - s)
        targets = self.grads() if grads is None else grads
        n = len(self.weights)
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                g *= cache.pre[i] > 0
            if targets is not False:
                targets[2 * i] += cache.inputs[i].T @ g
                targets[2 * i + 1] += g.sum(axis=0)
            if i > 0 or input_grad:
                g = g @ self.weights[i].T
        return g if input_grad else None


# --------------------------------------------------------------------------
# the two decoders


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DecoderError("non-finite decoder input")


def thickness_forward(params: DecoderParams, r, zT):
    """(tau, eta) for one ray/voxel pair, or a batch when inputs are 2-D."""
    r, zT = np.asarray(r), np.asarray(zT)
    _check_finite(r, zT)
    single = r.ndim == 1
    x = np.concatenate([np.atleast_2d(r), np.atleast_2d(zT)], axis=1)
    out, _ = params.forward(x)
    if single:
        return float(out[0, 0]), float(out[0, 1])
    return out[:, 0], out[:, 1]


def color_forward(params: DecoderParams, r, zC):
    r, zC = np.asarray(r), np.asarray(zC)
    _check_finite(r, zC)
    x = np.concatenate([np.atleast_2d(r), np.atleast_2d(zC)], axis=1)
    out, _ = params.forward(x)
    return out[0] if r.ndim == 1 else out


def backward(params: DecoderParams, cache: MlpCache | None, upstream, grads=None):
    """Parameter grads (accumulated) and input grads split as (d_r, d_z)."""
    gx = params.backward(cache, upstream, grads)
    return gx[:, :6], gx[:, 6:]


# --------------------------------------------------------------------------
# Adam


@dataclass(eq=False)
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray], lr: float):
    """In-place bias-corrected Adam update of ``params``."""
    if lr <= 0:
        raise DecoderError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DecoderError("parameter/gradient/state count mismatch")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DecoderError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        dt = p.dtype
        m *= dt.type(b1)
        m += dt.type(1 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1 - b2) * (g * g)
        denom = np.sqrt(v / dt.type(c2))
        denom += dt.type(state.eps)
        p -= dt.type(lr / c1) * m / denom
    return params
