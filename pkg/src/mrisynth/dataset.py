"""2.5D nine-channel slice samples, three-plane enumeration and online augmentation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, ShapeError
from .preprocess import input_names
from .volume_io import SequenceSet

PLANES = ("sagittal", "coronal", "axial")
PLANE_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}


def plane_axis(plane: str) -> int:
    try:
        return PLANE_AXIS[plane]
    except KeyError:
        raise ArgumentError(f"unknown plane {plane!r}; expected one of {PLANES}") from None


def take_slice(data: np.ndarray, plane: str, z: int) -> np.ndarray:
    return np.take(data, z, axis=plane_axis(plane))


@dataclass
class Stack25D:
    input: np.ndarray  # (9, H, W) float32
    target: Optional[np.ndarray]  # (H, W)
    tumor_mask: Optional[np.ndarray]  # (H, W) uint8
    plane: str
    slice_index: int

    def __post_init__(self):
        if self.input.ndim != 3 or self.input.shape[0] != 9:
            raise ShapeError(f"2.5D input must have 9 channels, got {self.input.shape}")
        hw = self.input.shape[1:]
        for name in ("target", "tumor_mask"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != hw:
                raise ShapeError(f"{name} shape {arr.shape} differs from input {hw}")


@dataclass(frozen=True)
class AugmentConfig:
    pad_to: Tuple[int, int] = (288, 288)
    crop_to: Tuple[int, int] = (256, 256)
    hflip_p: float = 0.5
    rot_p: float = 0.5
    rot_range_deg: Tuple[float, float] = (-15.0, 15.0)

    def __post_init__(self):
        if any(c > p for c, p in zip(self.crop_to, self.pad_to)):
            raise ArgumentError(f"crop {self.crop_to} larger than padding {self.pad_to}")


@dataclass(frozen=True)
class AugmentParams:
    crop_origin: Tuple[int, int]
    flip: bool
    angle_deg: float


def _neighbor(data: np.ndarray, axis: int, z: int) -> np.ndarray:
    if 0 <= z < data.shape[axis]:
        return np.take(data, z, axis=axis)
    shape = [n for i, n in enumerate(data.shape) if i != axis]
    return np.zeros(shape, dtype=data.dtype)


def extract_stack(seqs: SequenceSet, target_name: Optional[str], plane: str, z: int) -> Stack25D:
    """Slice ``z`` along ``plane`` with one neighbor either side for each input sequence.

    Channels are ``(A[z-1], A[z], A[z+1], B[z-1], ...)`` with A, B, C the
    input sequences in canonical order; out-of-volume neighbors are zero.
    """
    axis = plane_axis(plane)
    names = input_names(target_name, seqs.sequences) if target_name else seqs.present()
    if len(names) != 3:
        raise ArgumentError(f"need exactly three input sequences, have {names}")
    n = seqs.shape[axis]
    if not 0 <= z < n:
        raise ArgumentError(f"slice {z} out of range for {plane} (size {n})")
    channels = []
    for name in names:
        data = seqs.sequences[name].data
        channels.extend(_neighbor(data, axis, k) for k in (z - 1, z, z + 1))
    stack = np.stack(channels).astype(np.float32)
    target = None
    if target_name is not None and target_name in seqs.sequences:
        target = take_slice(seqs.sequences[target_name].data, plane, z).astype(np.float32)
    mask = None
    if seqs.seg is not None:
        mask = (take_slice(seqs.seg.labels, plane, z) > 0).astype(np.uint8)
    return Stack25D(stack, target, mask, plane, z)


def enumerate_slices(seqs: SequenceSet, target_name: str, planes: Sequence[str] = PLANES) -> List[Tuple[str, int]]:
    """(plane, z) pairs whose target slice holds at least one nonzero voxel."""
    target = seqs.sequences[target_name].data
    out = []
    for plane in planes:
        axis = plane_axis(plane)
        other = tuple(i for i in range(3) if i != axis)
        nonzero = np.any(target != 0, axis=other)
        out.extend((plane, int(z)) for z in np.flatnonzero(nonzero))
    return out


def sample_augment_params(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    # fixed draw order so every parameter consumes the same stream position
    u_flip, u_rot, angle = rng.random(), rng.random(), rng.uniform(*cfg.rot_range_deg)
    oy = int(rng.integers(0, cfg.pad_to[0] - cfg.crop_to[0] + 1))
    ox = int(rng.integers(0, cfg.pad_to[1] - cfg.crop_to[1] + 1))
    return AugmentParams((oy, ox), bool(u_flip < cfg.hflip_p), float(angle) if u_rot < cfg.rot_p else 0.0)


def _pad_center(img: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = img.shape[-2:]
    if h > size[0] or w > size[1]:
        raise ShapeError(f"slice {img.shape[-2:]} larger than pad target {size}")
    top, left = (size[0] - h) // 2, (size[1] - w) // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(top, size[0] - h - top), (left, size[1] - w - left)]
    return np.pad(img, pad)


def transform_coords(params: AugmentParams, cfg: AugmentConfig) -> np.ndarray:
    """Source coordinates in the padded image for every output pixel, shape (2, h, w).

    Output pixel (r, c) is rotated by ``angle`` about the crop center, mirrored
    if flipped, then offset by the crop origin.
    """
    h, w = cfg.crop_to
    r, c = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = np.deg2rad(params.angle_deg)
    dr, dc = r - cy, c - cx
    # the source is sampled at R(t) applied to the output offset, so content turns by -t
    sr = cy + np.cos(t) * dr - np.sin(t) * dc
    sc = cx + np.sin(t) * dr + np.cos(t) * dc
    if params.flip:
        sc = (w - 1) - sc
    return np.stack([sr + params.crop_origin[0], sc + params.crop_origin[1]])


def _warp(img: np.ndarray, coords: np.ndarray, order: int) -> np.ndarray:
    return ndimage.map_coordinates(img, coords, order=order, mode="constant", cval=0.0)


def apply_augment(s: Stack25D, params: AugmentParams, cfg: AugmentConfig) -> Stack25D:
    coords = transform_coords(params, cfg)
    exact = params.angle_deg == 0.0

    def warp(img, order):
        padded = _pad_center(img, cfg.pad_to)
        if exact:
            # pure crop + flip: integer indexing, no interpolation
            oy, ox = params.crop_origin
            out = padded[..., oy : oy + cfg.crop_to[0], ox : ox + cfg.crop_to[1]]
            return out[..., ::-1].copy() if params.flip else out.copy()
        if padded.ndim == 3:
            return np.stack([_warp(ch, coords, order) for ch in padded])
        return _warp(padded, coords, order)

    inp = np.clip(warp(s.input.astype(np.float64), 1), 0.0, 1.0).astype(np.float32)
    target = None if s.target is None else np.clip(warp(s.target.astype(np.float64), 1), 0.0, 1.0).astype(np.float32)
    mask = None if s.tumor_mask is None else warp(s.tumor_mask, 0).astype(np.uint8)
    return Stack25D(inp, target, mask, s.plane, s.slice_index)


def augment(s: Stack25D, cfg: AugmentConfig, rng: np.random.Generator) -> Stack25D:
    """Random pad-crop, horizontal flip and rotation, shared across all channels."""
    return apply_augment(s, sample_augment_params(cfg, rng), cfg)


def epoch_sampler(samples: Sequence, epoch_size: int, seed: int, epoch: int = 0) -> Iterator[int]:
    """Indices drawn uniformly with replacement; reproducible per (seed, epoch)."""
    if len(samples) == 0:
        raise ArgumentError("cannot sample from an empty list")
    if epoch_size < 1:
        raise ArgumentError("epoch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    return iter(int(i) for i in rng.integers(0, len(samples), size=epoch_size))


def sample_rng(seed: int, global_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, global_index])


def split_cases(case_ids: Sequence[str], dev_fraction: float = 0.1) -> Tuple[List[str], List[str]]:
    """Deterministic train/dev split: the last ``dev_fraction`` of sorted ids go to dev."""
    ids = sorted(case_ids)
    n_dev = int(round(len(ids) * dev_fraction))
    if len(ids) > 1:
        n_dev = max(n_dev, 1)
    else:
        n_dev = 0
    return ids[: len(ids) - n_dev], ids[len(ids) - n_dev :]


class SliceIndex:
    """Flat index of every usable (case, plane, z) triple across a set of normalized cases."""

    def __init__(self, cases: Sequence[SequenceSet], target: str, planes: Sequence[str] = PLANES):
        self.cases = list(cases)
        self.target = target
        self.entries = [
            (ci, plane, z) for ci, case in enumerate(self.cases) for plane, z in enumerate_slices(case, target, planes)
        ]

    def __len__(self):
        return len(self.entries)

    def stack(self, i: int) -> Stack25D:
        ci, plane, z = self.entries[i]
        return extract_stack(self.cases[ci], self.target, plane, z)

    def batch(self, indices: Sequence[int], cfg: Optional[AugmentConfig], seed: int, first_global: int):
        """Stack augmented samples into arrays ``(B, 9, h, w)``, ``(B, 1, h, w)``, ``(B, 1, h, w)``."""
        xs, ys, ms = [], [], []
        for k, i in enumerate(indices):
            s = self.stack(i)
            if cfg is not None:
                s = augment(s, cfg, sample_rng(seed, first_global + k))
            xs.append(s.input)
            ys.append(s.target[None])
            ms.append(s.tumor_mask[None] if s.tumor_mask is not None else np.zeros_like(s.target[None]))
        return np.stack(xs), np.stack(ys).astype(np.float32), np.stack(ms).astype(np.float32)
