import numpy as np
import pytest

from svlf.octree import GridConfig, SparseOctree, morton_encode


def random_octree(rng, resolution=16, density=0.1) -> SparseOctree:
    """Random leaf occupancy at the given density."""
    n = resolution**3
    k = max(1, int(round(density * n)))
    flat = rng.choice(n, size=k, replace=False)
    cells = np.stack(np.unravel_index(flat, (resolution,) * 3), -1)
    return SparseOctree.from_leaf_codes(morton_encode(cells), GridConfig(resolution))


def random_rays(rng, n, inside_frac=0.2):
    """Rays from around the unit cube (some from inside) aimed into it."""
    o = rng.uniform(-0.6, 1.6, (n, 3))
    k = int(inside_frac * n)
    o[:k] = rng.uniform(0.0, 1.0, (k, 3))
    target = rng.uniform(0.0, 1.0, (n, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return o, d


def rel_err(a, b) -> float:
    """Norm-wise relative error of a against reference b."""
    a, b = np.ravel(np.asarray(a, np.float64)), np.ravel(np.asarray(b, np.float64))
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / max(nb, 1e-12))


def central_diff(f, x: np.ndarray, idx, eps: float) -> np.ndarray:
    """Central differences of scalar f w.r.t. x.flat[idx] (x perturbed in place)."""
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
