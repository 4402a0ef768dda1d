"""Image and depth reconstruction metrics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    depth_rmse: float
    depth_mae: float
    n_pixels: int
    n_depth_pixels: int

    def as_row(self) -> dict:
        return {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "depth_rmse_e3": 1e3 * self.depth_rmse,
            "depth_mae_e3": 1e3 * self.depth_mae,
        }


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def psnr(pred, gt) -> float:
    p, g = _pair(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation with a symmetric kernel
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim_map(pred, gt) -> np.ndarray:
    p, g = _pair(pred, gt)
    if p.ndim == 2:
        p, g = p[..., None], g[..., None]
    if p.shape[0] < SSIM_WIN or p.shape[1] < SSIM_WIN:
        raise MetricError("image smaller than the SSIM window")
    w = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    maps = []
    for ch in range(p.shape[2]):
        x, y = p[..., ch], g[..., ch]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        maps.append(num / den)
    return np.stack(maps, axis=-1)


def ssim(pred, gt) -> float:
    """Mean SSIM (11x11 Gaussian, sigma 1.5, K1=0.01, K2=0.03, range 1)."""
    return float(ssim_map(pred, gt).mean())


def depth_errors(pred_depth, gt_depth, gt_mask) -> tuple[float, float]:
    """(RMSE, MAE) over pixels where ``gt_mask`` is set."""
    p, g = _pair(pred_depth, gt_depth)
    m = np.asarray(gt_mask, bool)
    if m.shape != p.shape:
        raise MetricError("mask shape mismatch")
    if not m.any():
        warnings.warn("depth_errors: empty mask", RuntimeWarning, stacklevel=2)
        return 0.0, 0.0
    e = p[m] - g[m]
    return float(np.sqrt(np.mean(e * e))), float(np.mean(np.abs(e)))


def evaluate_frame(rgb, gt_rgb, depth, gt_depth, gt_mask) -> MetricReport:
    rmse, mae = depth_errors(depth, gt_depth, gt_mask)
    return MetricReport(
        psnr(rgb, gt_rgb), ssim(rgb, gt_rgb), rmse, mae,
        int(np.asarray(gt_rgb).shape[0] * np.asarray(gt_rgb).shape[1]),
        int(np.asarray(gt_mask, bool).sum()),
    )
