"""Matplotlib figures written next to the tabular reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no version/date metadata so figures are reproducible byte for byte
PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(Path(path), dpi=100, metadata=PNG_META)
    plt.close(fig)


def comparison_figure(path, gt_rgb, rgb, gt_depth, depth, mask, title: str = ""):
    """GT / prediction / abs error for color and depth in a 2x3 grid."""
    fig, ax = plt.subplots(2, 3, figsize=(9, 6))
    err = np.abs(np.asarray(rgb, float) - np.asarray(gt_rgb, float)).mean(-1)
    ax[0, 0].imshow(np.clip(gt_rgb, 0, 1))
    ax[0, 1].imshow(np.clip(rgb, 0, 1))
    im = ax[0, 2].imshow(err, cmap="magma", vmin=0)
    fig.colorbar(im, ax=ax[0, 2], fraction=0.046)
    fg = np.asarray(gt_depth)[mask]
    lo, hi = (float(fg.min()), float(fg.max())) if fg.size else (0.0, 1.0)
    ax[1, 0].imshow(np.where(mask, gt_depth, np.nan), cmap="viridis", vmin=lo, vmax=hi)
    ax[1, 1].imshow(np.where(depth > 0, depth, np.nan), cmap="viridis", vmin=lo, vmax=hi)
    im = ax[1, 2].imshow(np.where(mask, np.abs(depth - gt_depth), np.nan), cmap="magma", vmin=0)
    fig.colorbar(im, ax=ax[1, 2], fraction=0.046)
    for a, t in zip(ax.ravel(), ["GT", "rendered", "|error|", "GT depth", "depth", "|depth error|"]):
        a.set_title(t)
        a.set_axis_off()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def training_curve(path, records):
    """Loss (log scale) and validation PSNR per epoch, stages shaded."""
    if not records:
        return
    x = np.arange(len(records))
    loss = np.array([r["loss"] for r in records])
    vp = np.array([r["val_psnr"] for r in records])
    stage = np.array([r["stage"] for r in records])
    fig, a1 = plt.subplots(figsize=(7, 4))
    a1.semilogy(x, np.where(loss > 0, loss, np.nan), color="C0", label="train loss")
    a1.set_xlabel("epoch (all stages)")
    a1.set_ylabel("loss")
    for s, c in zip((1, 2, 3), ("#eeeeff", "#eeffee", "#ffeeee")):
        idx = np.flatnonzero(stage == s)
        if idx.size:
            a1.axvspan(idx[0] - 0.5, idx[-1] + 0.5, color=c, zorder=0)
    ok = np.isfinite(vp)
    if ok.any():
        a2 = a1.twinx()
        a2.plot(x[ok], vp[ok], "o-", color="C1", ms=3, label="val PSNR")
        a2.set_ylabel("val PSNR (dB)")
    fig.tight_layout()
    _save(fig, path)


def read_train_log(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        f = line.split("\t")
        if len(f) >= 4:
            out.append({"stage": int(f[0]), "epoch": int(f[1]), "loss": float(f[2]),
                        "val_psnr": float(f[3])})
    return out
