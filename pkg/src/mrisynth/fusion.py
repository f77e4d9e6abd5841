"""Slice-wise volume prediction and nine-orientation fusion.

Each of the three slicing planes is used once as acquired and twice after a
45 degree tilt about one of the two in-plane axes. Tilted volumes live on an
enlarged canvas so no anatomy is cut off; predictions are rotated back and
averaged per voxel over the orientations whose interpolation support is
fully inside the original grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from .dataset import PLANES, extract_stack, plane_axis
from .errors import ArgumentError, ShapeError
from .preprocess import input_names
from .volume_io import SequenceSet, Volume

TILT_DEG = 45.0
# validity threshold for the back-rotated support (trilinear weights sum)
_VALID = 1.0 - 1e-6

Predictor = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class Orientation:
    base_plane: str
    tilt_axis: Optional[int] = None  # volume axis rotated about; None means untilted

    @property
    def name(self) -> str:
        if self.tilt_axis is None:
            return self.base_plane
        return f"{self.base_plane}+tilt{self.tilt_axis}"


def orientations(mode: str = "9") -> List[Orientation]:
    """The 9-orientation fusion set, or the 3 untilted planes for ``mode='3'``."""
    if str(mode) not in ("9", "3"):
        raise ArgumentError(f"fusion mode must be '9' or '3', got {mode!r}")
    out = []
    for plane in PLANES:
        out.append(Orientation(plane))
        if str(mode) == "9":
            axis = plane_axis(plane)
            out.extend(Orientation(plane, a) for a in range(3) if a != axis)
    return out


def _rotation(axis: int, deg: float) -> np.ndarray:
    """3x3 rotation by ``deg`` in the plane of the two axes other than ``axis``."""
    i, j = [a for a in range(3) if a != axis]
    t = math.radians(deg)
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = math.cos(t), -math.sin(t), math.sin(t), math.cos(t)
    return r


def canvas_shape(shape, axis: int) -> Tuple[int, int, int]:
    """Grid that holds the 45-degree tilted volume without clipping."""
    i, j = [a for a in range(3) if a != axis]
    side = int(math.ceil((shape[i] + shape[j]) / math.sqrt(2))) + 2
    out = list(shape)
    out[i] = out[j] = max(side, shape[i], shape[j])
    return tuple(out)


def _center(shape) -> np.ndarray:
    return (np.asarray(shape, dtype=np.float64) - 1) / 2


def _resample(data: np.ndarray, matrix: np.ndarray, out_shape, src_shape, order=1) -> np.ndarray:
    """Sample ``data`` at ``matrix @ (p - c_out) + c_src`` for every output voxel ``p``."""
    offset = _center(src_shape) - matrix @ _center(out_shape)
    return ndimage.affine_transform(
        data, matrix, offset=offset, output_shape=tuple(out_shape), order=order, mode="constant", cval=0.0
    )


def rotate_to_canvas(data: np.ndarray, axis: int, deg: float = TILT_DEG) -> np.ndarray:
    canvas = canvas_shape(data.shape, axis)
    # canvas voxel q shows the source at R^-1 (q - c)
    return _resample(np.asarray(data, dtype=np.float64), _rotation(axis, -deg), canvas, data.shape)


def rotate_from_canvas(canvas: np.ndarray, axis: int, shape, deg: float = TILT_DEG) -> np.ndarray:
    return _resample(np.asarray(canvas, dtype=np.float64), _rotation(axis, deg), shape, canvas.shape)


def back_support(shape, axis: int, deg: float = TILT_DEG) -> np.ndarray:
    """Voxels of the original grid whose back-rotated value only uses in-volume canvas samples."""
    inside = rotate_to_canvas(np.ones(shape), axis, deg) >= _VALID
    back = rotate_from_canvas(inside.astype(np.float64), axis, shape, deg)
    return back >= _VALID


def _pad_amount(n: int, multiple: int) -> Tuple[int, int]:
    total = (-n) % multiple
    return total // 2, total - total // 2


def predict_volume(
    gen: Predictor,
    inputs: SequenceSet,
    plane: str,
    target: Optional[str] = None,
    multiple: int = 1,
    batch_size: int = 16,
    max_side: Optional[int] = None,
) -> np.ndarray:
    """Run ``gen`` on every 2.5D slice along ``plane`` and stack the outputs.

    Slices are zero-padded (centered) to a multiple of ``multiple`` and
    cropped back afterwards, so the result has the input volume's shape.
    """
    axis = plane_axis(plane)
    shape = inputs.shape
    n = shape[axis]
    hw = [shape[a] for a in range(3) if a != axis]
    pads = [_pad_amount(s, multiple) for s in hw]
    if max_side is not None and any(s + sum(p) > max_side for s, p in zip(hw, pads)):
        raise ShapeError(f"padded slice size exceeds {max_side}")
    out = np.zeros((n,) + tuple(hw), dtype=np.float32)
    dtype = torch.float32
    for start in range(0, n, batch_size):
        zs = range(start, min(start + batch_size, n))
        stacks = np.stack([extract_stack(inputs, target, plane, z).input for z in zs])
        stacks = np.pad(stacks, [(0, 0), (0, 0), pads[0], pads[1]])
        with torch.no_grad():
            pred = gen(torch.from_numpy(stacks).to(dtype))
        pred = pred.detach().cpu().numpy()[:, 0]
        if pred.shape[-2:] != stacks.shape[-2:]:
            raise ShapeError(f"generator returned {pred.shape[-2:]}, expected {stacks.shape[-2:]}")
        out[start : start + len(zs)] = pred[:, pads[0][0] : pads[0][0] + hw[0], pads[1][0] : pads[1][0] + hw[1]]
    return np.moveaxis(out, 0, axis)


def _inputs_only(seqs: SequenceSet, target: Optional[str]) -> Tuple[SequenceSet, Optional[str]]:
    names = input_names(target, seqs.sequences) if target else seqs.present()
    if len(names) != 3:
        raise ArgumentError(f"fusion needs three input sequences, have {names}")
    return SequenceSet(seqs.case_id, {n: seqs.sequences[n] for n in names}), target


def orientation_prediction(
    gen: Predictor, seqs: SequenceSet, o: Orientation, target: Optional[str] = None, multiple: int = 1, batch_size: int = 16
) -> Tuple[np.ndarray, np.ndarray]:
    """Prediction for one orientation in the original grid plus its validity mask."""
    inputs, target = _inputs_only(seqs, target)
    if o.tilt_axis is None:
        pred = predict_volume(gen, inputs, o.base_plane, target, multiple, batch_size)
        return pred.astype(np.float64), np.ones(inputs.shape, dtype=bool)
    rotated = {
        name: Volume(rotate_to_canvas(v.data, o.tilt_axis).astype(np.float32), v.spacing)
        for name, v in inputs.sequences.items()
    }
    canvas_set = SequenceSet(inputs.case_id, rotated)
    canvas_pred = predict_volume(gen, canvas_set, o.base_plane, target, multiple, batch_size)
    pred = rotate_from_canvas(canvas_pred, o.tilt_axis, inputs.shape)
    return pred, back_support(inputs.shape, o.tilt_axis)


@dataclass
class FusionResult:
    volume: np.ndarray
    counts: np.ndarray
    per_orientation: Optional[Dict[str, np.ndarray]] = None


def fuse(
    gen: Predictor,
    seqs: SequenceSet,
    target: Optional[str] = None,
    mode: str = "9",
    multiple: int = 1,
    batch_size: int = 16,
    keep_orientations: bool = False,
) -> FusionResult:
    """Mean of the per-orientation predictions, counting only valid voxels."""
    acc = np.zeros(seqs.shape, dtype=np.float64)
    counts = np.zeros(seqs.shape, dtype=np.int64)
    kept = {} if keep_orientations else None
    for o in orientations(mode):
        pred, valid = orientation_prediction(gen, seqs, o, target, multiple, batch_size)
        acc[valid] += pred[valid]
        counts += valid
        if kept is not None:
            kept[o.name] = np.where(valid, pred, np.nan)
    fused = np.where(counts > 0, acc / np.maximum(counts, 1), 0.0)
    return FusionResult(fused.astype(np.float32), counts, kept)


def as_predictor(model: torch.nn.Module) -> Predictor:
    param = next(model.parameters(), None)
    dtype = param.dtype if param is not None else torch.float32

    def run(x):
        return model(x.to(dtype))

    return run
