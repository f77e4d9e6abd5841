"""NIfTI volume I/O and the in-memory case representation.

Volumes are held in RAS+ voxel order, i.e. axis 0 is sagittal (left-right),
axis 1 coronal (posterior-anterior) and axis 2 axial (inferior-superior).
Every downstream module relies on that frame.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError

from . import SEQUENCES
from .errors import (
    ConsistencyError,
    DimensionalityError,
    FormatError,
    MissingInputError,
    ShapeError,
)

PathLike = Union[str, Path]

ORIENTATION_TAG = "RAS"
SEG_NAME = "seg"


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation_tag: str = ORIENTATION_TAG
    affine: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionalityError(f"volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"empty volume dimension in {self.data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.orientation_tag, self.affine)

    def header_affine(self) -> np.ndarray:
        if self.affine is not None:
            return np.asarray(self.affine, dtype=np.float64)
        return np.diag(list(self.spacing) + [1.0])


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise DimensionalityError(f"label map must be 3D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise FormatError("label map must hold integer class ids")
        if self.labels.size and self.labels.min() < 0:
            raise FormatError("label map contains negative class ids")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return tuple(self.labels.shape)

    def tumor_mask(self) -> np.ndarray:
        return self.labels > 0


@dataclass(frozen=True)
class SequenceSet:
    case_id: str
    sequences: Dict[str, Volume]
    seg: Optional[LabelVolume] = None

    def __post_init__(self):
        unknown = set(self.sequences) - set(SEQUENCES)
        if unknown:
            raise ConsistencyError(f"unknown sequence names {sorted(unknown)}")
        if not self.sequences:
            raise ConsistencyError(f"case {self.case_id} holds no sequences")
        ref = next(iter(self.sequences.values()))
        for name, vol in self.sequences.items():
            if vol.shape != ref.shape:
                raise ConsistencyError(
                    f"case {self.case_id}: {name} has shape {vol.shape}, expected {ref.shape}"
                )
            if not np.allclose(vol.spacing, ref.spacing, atol=1e-6):
                raise ConsistencyError(
                    f"case {self.case_id}: {name} has spacing {vol.spacing}, expected {ref.spacing}"
                )
        if self.seg is not None and self.seg.shape != ref.shape:
            raise ConsistencyError(
                f"case {self.case_id}: seg has shape {self.seg.shape}, expected {ref.shape}"
            )

    @property
    def shape(self):
        return next(iter(self.sequences.values())).shape

    @property
    def spacing(self):
        return next(iter(self.sequences.values())).spacing

    def present(self) -> Tuple[str, ...]:
        return tuple(s for s in SEQUENCES if s in self.sequences)

    def without(self, name: str) -> "SequenceSet":
        seqs = {k: v for k, v in self.sequences.items() if k != name}
        return SequenceSet(self.case_id, seqs, self.seg)

    def replace(self, sequences: Dict[str, Volume]) -> "SequenceSet":
        return SequenceSet(self.case_id, sequences, self.seg)


def _reorient(img):
    try:
        return nib.as_closest_canonical(img)
    except Exception as exc:  # nibabel raises a zoo of types for odd affines
        raise FormatError(f"cannot reorient image: {exc}") from exc


def _read(path: PathLike):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
    except (ImageFileError, EOFError, zlib.error, ValueError, OSError) as exc:
        if isinstance(exc, (FileNotFoundError, PermissionError)):
            raise
        raise FormatError(f"{path}: unreadable NIfTI header ({exc})") from exc
    if len(img.shape) != 3:
        if len(img.shape) == 4 and img.shape[3] == 1:
            img = img.slicer[..., 0]
        else:
            raise DimensionalityError(f"{path}: expected a 3D image, got shape {img.shape}")
    img = _reorient(img)
    try:
        data = np.asanyarray(img.dataobj)
    except (EOFError, zlib.error, ValueError, OSError) as exc:
        raise FormatError(f"{path}: truncated or corrupt image data ({exc})") from exc
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return img, data, spacing


def load_volume(path: PathLike) -> Volume:
    """Read a NIfTI-1 volume (``.nii`` or ``.nii.gz``) into canonical RAS+ order."""
    img, data, spacing = _read(path)
    data = np.asarray(data)
    if data.dtype != np.float32:
        data = data.astype(np.float32)
    return Volume(np.ascontiguousarray(data), spacing, ORIENTATION_TAG, img.affine)


def load_labels(path: PathLike) -> LabelVolume:
    img, data, spacing = _read(path)
    data = np.asarray(data)
    if not np.issubdtype(data.dtype, np.integer):
        rounded = np.rint(data)
        if not np.array_equal(rounded, data):
            raise FormatError(f"{path}: label map holds non-integer values")
        data = rounded
    return LabelVolume(np.ascontiguousarray(data.astype(np.uint16)), spacing, img.affine)


def _write(data: np.ndarray, affine: np.ndarray, spacing, path: PathLike, dtype):
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    img = nib.Nifti1Image(np.asarray(data, dtype=dtype), affine)
    img.header.set_data_dtype(dtype)
    img.header.set_zooms(tuple(float(s) for s in spacing))
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))


def save_volume(v: Volume, path: PathLike) -> None:
    """Write ``v`` as 32-bit float NIfTI-1 (gzip when the suffix is ``.gz``)."""
    _write(v.data, v.header_affine(), v.spacing, path, np.float32)


def save_labels(seg: LabelVolume, path: PathLike) -> None:
    affine = seg.affine if seg.affine is not None else np.diag(list(seg.spacing) + [1.0])
    _write(seg.labels, affine, seg.spacing, path, np.uint16)


def _find_file(directory: Path, suffix: str) -> Optional[Path]:
    want = f"-{suffix}.nii"
    matches = sorted(
        p
        for p in directory.iterdir()
        if p.is_file() and (p.name.lower().endswith(want) or p.name.lower().endswith(want + ".gz"))
    )
    return matches[0] if matches else None


def case_file(directory: PathLike, case_id: str, name: str) -> Path:
    return Path(directory) / f"{case_id}-{name}.nii.gz"


def load_case(
    directory: PathLike,
    missing: Optional[str] = None,
    require_seg: bool = False,
    case_id: Optional[str] = None,
) -> SequenceSet:
    """Load a BraTS-style case folder ``<case>-{t1n,t1c,t2w,t2f,seg}.nii.gz``.

    ``missing`` drops that sequence (it need not exist on disk). All other
    sequences are required.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such case directory: {directory}")
    if missing is not None:
        missing = missing.lower()
        if missing not in SEQUENCES:
            raise ConsistencyError(f"unknown sequence name {missing!r}")
    case_id = case_id or directory.name
    sequences = {}
    for name in SEQUENCES:
        if name == missing:
            continue
        path = _find_file(directory, name)
        if path is None:
            raise MissingInputError(f"case {case_id}: no file for sequence {name} in {directory}")
        sequences[name] = load_volume(path)
    seg_path = _find_file(directory, SEG_NAME)
    if seg_path is None and require_seg:
        raise MissingInputError(f"case {case_id}: segmentation file missing in {directory}")
    seg = load_labels(seg_path) if seg_path is not None else None
    return SequenceSet(case_id, sequences, seg)


def save_case(case: SequenceSet, directory: PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, vol in case.sequences.items():
        save_volume(vol, case_file(directory, case.case_id, name))
    if case.seg is not None:
        save_labels(case.seg, case_file(directory, case.case_id, SEG_NAME))
    return directory


def list_case_dirs(root: PathLike) -> Sequence[Path]:
    """Case folders below ``root``, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such data directory: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("*.nii*")))
