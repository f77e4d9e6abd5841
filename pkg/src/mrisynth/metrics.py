"""Region-restricted SSIM and PSNR for tumor and healthy brain tissue."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyRegionError, ShapeError
from .volume_io import LabelVolume, Volume

CSV_FIELDS = ("case_id", "ssim_h", "ssim_t", "psnr_h", "psnr_t")
WINDOW = 11
SIGMA = 1.5


@dataclass(frozen=True)
class MetricRow:
    case_id: str
    ssim_h: float
    ssim_t: float  # nan when the case has no tumor
    psnr_h: float  # +inf when the region is reproduced exactly
    psnr_t: float


def _as_array(v):
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # 'mirror' reflects without repeating the edge voxel, like the training loss
    for axis in range(x.ndim):
        x = ndimage.correlate1d(x, g, axis=axis, mode="mirror")
    return x


def ssim_map(pred, ref, size: int = WINDOW, sigma: float = SIGMA, data_range: float = 1.0) -> np.ndarray:
    """Volumetric SSIM map (separable Gaussian window), same shape as the inputs."""
    a, b = _as_array(pred), _as_array(ref)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    g = gaussian_window(size, sigma)
    mu_a, mu_b = _blur(a, g), _blur(b, g)
    var_a = _blur(a * a, g) - mu_a**2
    var_b = _blur(b * b, g) - mu_b**2
    cov = _blur(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def _region(mask, shape) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if m.shape != tuple(shape):
        raise ShapeError(f"mask shape {m.shape} differs from volume {tuple(shape)}")
    if not m.any():
        raise EmptyRegionError("region mask is empty")
    return m


def masked_ssim(pred, ref, region_mask, ssim_values: Optional[np.ndarray] = None) -> float:
    """Mean of the full-volume SSIM map over ``region_mask``."""
    ref_arr = _as_array(ref)
    m = _region(region_mask, ref_arr.shape)
    if ssim_values is None:
        ssim_values = ssim_map(pred, ref_arr)
    return float(np.mean(ssim_values[m]))


def masked_psnr(pred, ref, region_mask, data_range: float = 1.0) -> float:
    a, b = _as_array(pred), _as_array(ref)
    m = _region(region_mask, b.shape)
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def region_masks(ref, seg):
    """``(tumor, healthy, brain)`` with brain = ref > 0 and healthy = brain minus tumor."""
    ref_arr = _as_array(ref)
    labels = seg.labels if isinstance(seg, LabelVolume) else np.asarray(seg)
    tumor = labels > 0
    brain = ref_arr > 0
    healthy = brain & ~tumor
    return tumor, healthy, brain


def normalize_pair(pred, ref):
    """Scale both volumes by the reference range; the prediction is clamped to that range."""
    a, b = _as_array(pred), _as_array(ref)
    lo, hi = float(b.min()), float(b.max())
    if hi <= lo:
        return np.zeros_like(a), np.zeros_like(b)
    a = (np.clip(a, lo, hi) - lo) / (hi - lo)
    return a, (b - lo) / (hi - lo)


def evaluate_case(pred, ref, seg, case_id: str = "") -> MetricRow:
    a, b = _as_array(pred), _as_array(ref)
    if a.shape != b.shape:
        raise ShapeError(f"prediction shape {a.shape} differs from reference {b.shape}")
    tumor, healthy, _ = region_masks(b, seg)
    a, b = normalize_pair(a, b)
    smap = ssim_map(a, b)
    ssim_h = masked_ssim(a, b, healthy, smap) if healthy.any() else math.nan
    psnr_h = masked_psnr(a, b, healthy) if healthy.any() else math.nan
    if tumor.any():
        ssim_t, psnr_t = masked_ssim(a, b, tumor, smap), masked_psnr(a, b, tumor)
    else:
        ssim_t = psnr_t = math.nan
    return MetricRow(case_id, ssim_h, ssim_t, psnr_h, psnr_t)


def evaluate_global(pred, ref, case_id: str = "") -> MetricRow:
    """Whole-brain metrics when no segmentation exists; reported in the healthy columns."""
    a, b = normalize_pair(pred, ref)
    brain = _as_array(ref) > 0
    return MetricRow(case_id, masked_ssim(a, b, brain), math.nan, masked_psnr(a, b, brain), math.nan)


def mean_row(rows: Sequence[MetricRow], case_id: str = "mean") -> MetricRow:
    def avg(key):
        vals = [getattr(r, key) for r in rows if not math.isnan(getattr(r, key))]
        if not vals:
            return math.nan
        if any(math.isinf(v) for v in vals):
            return math.inf
        return math.fsum(vals) / len(vals)

    return MetricRow(case_id, *(avg(k) for k in CSV_FIELDS[1:]))


def format_value(v: float) -> str:
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf"
    return repr(float(v))


def write_metrics_csv(rows: Iterable[MetricRow], path, with_mean: bool = True) -> List[MetricRow]:
    rows = list(rows)
    out = rows + ([mean_row(rows)] if with_mean and rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in out:
            writer.writerow([r.case_id] + [format_value(getattr(r, k)) for k in CSV_FIELDS[1:]])
    return out


def read_metrics_csv(path) -> List[MetricRow]:
    with open(path, newline="") as fh:
        return [
            MetricRow(rec["case_id"], *(float(rec[k]) for k in CSV_FIELDS[1:]))
            for rec in csv.DictReader(fh)
        ]


def row_dict(r: MetricRow) -> dict:
    return {k: (v if isinstance(v, str) else format_value(v) if not math.isfinite(v) else v) for k, v in asdict(r).items()}
