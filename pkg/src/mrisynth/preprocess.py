"""Intensity standardization (Nyul-style landmarks) and MinMax scaling."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import SEQUENCES
from .errors import DegenerateHistogramError, DegenerateRangeError, FormatError
from .volume_io import SequenceSet, Volume

DEFAULT_PERCENTILES = (1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0)
LANDMARK_RANGE = (0.0, 100.0)
CLAMP_FACTOR = 1.5
_TIE_EPS = 1e-6


@dataclass(frozen=True)
class StandardScale:
    sequence_name: str
    percentile_points: Tuple[float, ...]
    standard_landmarks: Tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.percentile_points, dtype=float)
        s = np.asarray(self.standard_landmarks, dtype=float)
        if p.ndim != 1 or p.size < 2 or p.size != s.size:
            raise FormatError("percentiles and landmarks must be equal-length lists of >= 2 values")
        if np.any(p <= 0) or np.any(p >= 100):
            raise FormatError("percentile points must lie strictly inside (0, 100)")
        if np.any(np.diff(p) <= 0) or np.any(np.diff(s) <= 0):
            raise FormatError("percentiles and landmarks must be strictly increasing")
        object.__setattr__(self, "percentile_points", tuple(float(x) for x in p))
        object.__setattr__(self, "standard_landmarks", tuple(float(x) for x in s))

    def to_dict(self) -> dict:
        return {
            "sequence": self.sequence_name,
            "percentiles": list(self.percentile_points),
            "landmarks": list(self.standard_landmarks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardScale":
        try:
            return cls(d["sequence"], tuple(d["percentiles"]), tuple(d["landmarks"]))
        except KeyError as exc:
            raise FormatError(f"landmark entry missing key {exc}") from exc


@dataclass(frozen=True)
class MinMaxScale:
    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or self.hi <= self.lo:
            raise DegenerateRangeError(f"degenerate intensity range [{self.lo}, {self.hi}]")


def foreground_percentiles(data: np.ndarray, percentile_points: Sequence[float]) -> np.ndarray:
    fg = np.asarray(data, dtype=np.float64)
    fg = fg[fg > 0]
    if fg.size < 2 or fg.min() == fg.max():
        raise DegenerateHistogramError("foreground holds fewer than two distinct intensities")
    return np.percentile(fg, percentile_points)


def _strictly_increasing(values: np.ndarray) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    for i in range(1, out.size):
        if out[i] <= out[i - 1]:
            out[i] = out[i - 1] + _TIE_EPS
    return out


def fit_landmarks(
    volumes: Iterable[Volume],
    percentile_points: Sequence[float] = DEFAULT_PERCENTILES,
    sequence_name: str = "",
) -> StandardScale:
    """Average the foreground percentiles of ``volumes`` and stretch them onto [0, 100]."""
    points = tuple(float(p) for p in percentile_points)
    per_volume = [foreground_percentiles(v.data, points) for v in volumes]
    if not per_volume:
        raise DegenerateHistogramError("no volumes given")
    # fixed summation order keeps the result independent of how percentiles were gathered
    mean = np.zeros(len(points))
    for row in per_volume:
        mean += row
    mean /= len(per_volume)
    lo, hi = LANDMARK_RANGE
    if mean[-1] <= mean[0]:
        raise DegenerateHistogramError("averaged landmarks collapse to a single intensity")
    landmarks = lo + (mean - mean[0]) * (hi - lo) / (mean[-1] - mean[0])
    return StandardScale(sequence_name, points, tuple(_strictly_increasing(landmarks)))


def _piecewise_linear(x: np.ndarray, xp: np.ndarray, fp: np.ndarray) -> np.ndarray:
    out = np.interp(x, xp, fp)
    lo_slope = (fp[1] - fp[0]) / (xp[1] - xp[0])
    hi_slope = (fp[-1] - fp[-2]) / (xp[-1] - xp[-2])
    below = x < xp[0]
    above = x > xp[-1]
    out[below] = fp[0] + (x[below] - xp[0]) * lo_slope
    out[above] = fp[-1] + (x[above] - xp[-1]) * hi_slope
    return out


def standardize(v: Volume, scale: StandardScale) -> Volume:
    """Map ``v`` through its own foreground percentiles onto the standard landmarks.

    Background (``<= 0``) stays 0; the output is clamped to
    ``[0, 1.5 * top landmark]``.
    """
    own = foreground_percentiles(v.data, scale.percentile_points)
    own = _strictly_increasing(own)
    landmarks = np.asarray(scale.standard_landmarks)
    data = np.asarray(v.data, dtype=np.float64)
    fg = data > 0
    out = np.zeros_like(data)
    out[fg] = _piecewise_linear(data[fg], own, landmarks)
    np.clip(out, 0.0, CLAMP_FACTOR * landmarks[-1], out=out)
    return v.with_data(out.astype(np.float32))


def minmax_fit(volumes: Sequence[Volume]) -> MinMaxScale:
    lo = min(float(np.min(v.data)) for v in volumes)
    hi = max(float(np.max(v.data)) for v in volumes)
    return MinMaxScale(lo, hi)


def minmax_fit_inputs(inputs: Sequence[Volume]) -> MinMaxScale:
    """Joint min/max over the three input volumes."""
    if len(inputs) != 3:
        raise DegenerateRangeError(f"expected three input volumes, got {len(inputs)}")
    shape = inputs[0].shape
    if any(v.shape != shape for v in inputs):
        raise DegenerateRangeError("input volumes differ in shape")
    return minmax_fit(inputs)


def minmax_apply(v: Volume, s: MinMaxScale) -> Volume:
    data = (np.asarray(v.data, dtype=np.float64) - s.lo) / (s.hi - s.lo)
    return v.with_data(data.astype(np.float32))


def minmax_invert(v: Volume, s: MinMaxScale) -> Volume:
    data = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DegenerateRangeError("cannot invert non-finite values")
    data = data * (s.hi - s.lo) + s.lo
    return v.with_data(np.maximum(data, 0.0).astype(np.float32))


@dataclass(frozen=True)
class NormalizedCase:
    case: SequenceSet
    input_scale: MinMaxScale
    target_scale: Optional[MinMaxScale]


def input_names(target: str, available: Iterable[str] = SEQUENCES) -> Tuple[str, ...]:
    """The three input sequences for ``target`` in canonical (alphabetical) order."""
    return tuple(s for s in SEQUENCES if s != target and s in set(available))


def normalize_case(
    case: SequenceSet,
    target: str,
    scales: Optional[Dict[str, StandardScale]] = None,
) -> NormalizedCase:
    """Standardize every present sequence, then MinMax the inputs jointly and the target alone."""
    seqs = dict(case.sequences)
    if scales:
        seqs = {name: standardize(vol, scales[name]) if name in scales else vol for name, vol in seqs.items()}
    names = input_names(target, seqs)
    in_scale = minmax_fit_inputs([seqs[n] for n in names])
    out = {n: minmax_apply(seqs[n], in_scale) for n in names}
    tgt_scale = None
    if target in seqs:
        tgt_scale = minmax_fit([seqs[target]])
        out[target] = minmax_apply(seqs[target], tgt_scale)
    return NormalizedCase(case.replace(out), in_scale, tgt_scale)


def save_scales(scales: Dict[str, StandardScale], path) -> None:
    payload = {"scales": [scales[k].to_dict() for k in SEQUENCES if k in scales]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_scales(path) -> Dict[str, StandardScale]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a landmark file ({exc})") from exc
    entries: List[dict] = payload["scales"] if isinstance(payload, dict) and "scales" in payload else payload
    if isinstance(entries, dict):
        entries = [entries]
    return {e["sequence"]: StandardScale.from_dict(e) for e in entries}
