"""Figures written next to the CSV reports (training curves, metric bars, slice panels)."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}
# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}

COLORS = ("#e69f00", "#56b4e9", "#009e73", "#f0e442", "#0072b2", "#d55e00", "#cc79a7")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META if path.suffix == ".png" else None, bbox_inches="tight")
    plt.close(fig)
    return path


def _read_log(path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {}
    for key in rows[0].keys() if rows else []:
        vals = [r[key] for r in rows]
        if all(v == "" for v in vals):
            continue
        cols[key] = np.array([float(v) if v != "" else np.nan for v in vals])
    return cols


def plot_training_log(log_csv, out_path, title: Optional[str] = None):
    """Per-term loss curves (log scale) and the learning rate against step."""
    cols = _read_log(log_csv)
    if "step" not in cols:
        return None
    with plt.rc_context(STYLE):
        fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 4.5), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
        skip = {"step", "epoch", "lr"}
        for color, (key, vals) in zip(COLORS, ((k, v) for k, v in cols.items() if k not in skip)):
            ok = np.isfinite(vals) & (vals > 0)
            if ok.any():
                ax.plot(cols["step"][ok], vals[ok], label=key, color=color)
        ax.set_yscale("log")
        ax.set_ylabel("loss")
        ax.legend(ncol=3, frameon=False)
        if title:
            ax.set_title(title)
        ax_lr.plot(cols["step"], cols["lr"], color="0.3")
        ax_lr.set_ylabel("lr")
        ax_lr.set_xlabel("step")
        return _save(fig, out_path)


def plot_metrics(rows: Sequence, out_path, title: Optional[str] = None):
    """Grouped bars of SSIM (left) and PSNR (right) per case, healthy vs tumor."""
    rows = [r for r in rows if r.case_id != "mean"]
    if not rows:
        return None
    ids = [r.case_id for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(max(6, 0.6 * len(rows) + 3), 3.2))
        for ax, (h, t, label) in zip(axes, (("ssim_h", "ssim_t", "SSIM"), ("psnr_h", "psnr_t", "PSNR [dB]"))):
            for off, key, color, name in ((-0.2, h, COLORS[4], "healthy"), (0.2, t, COLORS[5], "tumor")):
                vals = np.array([getattr(r, key) for r in rows], dtype=float)
                finite = np.where(np.isfinite(vals), vals, np.nan)
                ax.bar(x + off, np.nan_to_num(finite), width=0.4, color=color, label=name)
                for xi, v in zip(x + off, vals):
                    if math.isinf(v):
                        ax.annotate("inf", (xi, 0), ha="center", va="bottom", fontsize=7)
            ax.set_xticks(x)
            ax.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
            ax.set_ylabel(label)
        axes[0].legend(frameon=False)
        if title:
            fig.suptitle(title)
        return _save(fig, out_path)


def plot_slices(volumes: Dict[str, np.ndarray], out_path, axis: int = 2, index: Optional[int] = None):
    """Center slices of several same-shape volumes side by side, shared gray scale."""
    names = list(volumes)
    first = np.asarray(volumes[names[0]])
    idx = first.shape[axis] // 2 if index is None else index
    hi = max(float(np.nanmax(v)) for v in volumes.values()) or 1.0
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names), figsize=(2.2 * len(names), 2.4))
        for ax, name in zip(np.atleast_1d(axes), names):
            ax.imshow(np.take(np.asarray(volumes[name]), idx, axis=axis).T, cmap="gray", origin="lower", vmin=0, vmax=hi)
            ax.set_title(name)
            ax.axis("off")
        return _save(fig, out_path)
