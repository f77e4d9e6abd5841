"""Synthetic four-sequence brain phantoms with a tumor blob.

A shared tissue map (concentric ellipsoid shells plus a smooth tumor) is
pushed through one monotone intensity transform per sequence, so all four
sequences see the same anatomy with different contrast.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import SEQUENCES
from .errors import SpecError
from .volume_io import LabelVolume, SequenceSet, Volume

BRAIN_SEMI_AXES = 0.42  # fraction of each dimension
TUMOR_LABEL = 1
INTENSITY_SCALE = 1000.0

# per-sequence contrast: (offset, slope, power) applied to the shell level in [0, 1]
_CONTRAST = {
    "t1n": (0.30, 0.60, 1.0),
    "t1c": (0.35, 0.55, 1.5),
    "t2w": (0.90, -0.60, 1.0),
    "t2f": (0.80, -0.45, 0.7),
}
# tumor intensity relative to the brain maximum: hypo in T1N (but above the outer shell,
# so it stays clear of the lowest percentile), hyper in T1C and the T2s
_TUMOR_LEVEL = {"t1n": 0.62, "t1c": 1.40, "t2w": 1.25, "t2f": 1.10}


@dataclass(frozen=True)
class PhantomSpec:
    shape: Tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    tumor_radius_range: Tuple[float, float] = (3.0, 6.0)
    n_shells: int = 3
    noise_sigma: float = 0.0
    # amplitude of a smooth radial ramp inside the brain; 0 gives flat shells
    texture: float = 0.25

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise SpecError(f"phantom shape must have three sides >= 16, got {self.shape}")
        if self.n_shells < 1:
            raise SpecError("n_shells must be >= 1")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")
        if not 0 <= self.texture < 1:
            raise SpecError("texture must lie in [0, 1)")
        r_lo, r_hi = self.tumor_radius_range
        if not 0 < r_lo <= r_hi:
            raise SpecError(f"invalid tumor radius range {self.tumor_radius_range}")
        semi = BRAIN_SEMI_AXES * min(self.shape)
        # the blob wobbles by up to 25% of its radius
        if 1.25 * r_hi >= 0.8 * semi:
            raise SpecError(f"tumor radius {r_hi} does not fit a brain of semi-axis {semi:.1f}")


def _grid(shape):
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2
    axes = [np.arange(n, dtype=np.float64) - c for n, c in zip(shape, center)]
    return np.meshgrid(*axes, indexing="ij")


def brain_radius(shape) -> np.ndarray:
    """Normalized ellipsoidal radius; the brain is ``radius <= 1``."""
    semi = BRAIN_SEMI_AXES * np.asarray(shape, dtype=np.float64)
    x, y, z = _grid(shape)
    return np.sqrt((x / semi[0]) ** 2 + (y / semi[1]) ** 2 + (z / semi[2]) ** 2)


def _tumor_mask(spec: PhantomSpec, rng: np.random.Generator, radius: np.ndarray) -> np.ndarray:
    semi = BRAIN_SEMI_AXES * np.asarray(spec.shape, dtype=np.float64)
    r = rng.uniform(*spec.tumor_radius_range)
    # keep the wobbly blob inside 80% of the ellipsoid
    room = np.maximum(0.8 * semi - 1.25 * r, 0.0)
    offset = rng.uniform(-1, 1, size=3) * room / np.sqrt(3)
    center = (np.asarray(spec.shape, dtype=np.float64) - 1) / 2 + offset
    axes = [np.arange(n, dtype=np.float64) - c for n, c in zip(spec.shape, center)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    dist = np.sqrt(x**2 + y**2 + z**2) + 1e-9
    # low-order angular harmonics make a smooth, non-spherical outline
    ux, uy, uz = x / dist, y / dist, z / dist
    a = rng.uniform(-0.25, 0.25, size=3) / 3
    wobble = 1.0 + a[0] * ux * uy * 3 + a[1] * uy * uz * 3 + a[2] * (uz**2 - ux**2) * 3
    mask = (dist <= r * wobble) & (radius <= 1.0)
    if not mask.any():
        raise SpecError("tumor fell outside the brain")
    return mask


def tissue_level(radius: np.ndarray, n_shells: int) -> np.ndarray:
    """Shell level in (0, 1] per voxel: 1 at the core, decreasing outwards."""
    shell = np.minimum(np.floor(radius * n_shells), n_shells - 1)
    return 1.0 - shell / max(n_shells, 1) * 0.8


def _contrast(name: str, level: np.ndarray) -> np.ndarray:
    offset, slope, power = _CONTRAST[name]
    return offset + slope * level**power


def generate_case(spec: PhantomSpec, case_id: str = "PHANTOM-0000") -> SequenceSet:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    radius = brain_radius(spec.shape)
    brain = radius <= 1.0
    tumor = _tumor_mask(spec, rng, radius)
    level = tissue_level(radius, spec.n_shells) * (1.0 - spec.texture * np.minimum(radius, 1.0))
    noise = rng.standard_normal((len(SEQUENCES),) + tuple(spec.shape))

    sequences = {}
    for i, name in enumerate(SEQUENCES):
        img = _contrast(name, level)
        img[tumor] = _TUMOR_LEVEL[name] * max(_contrast(name, np.array([0.2, 1.0])))
        if spec.noise_sigma > 0:
            img = img + spec.noise_sigma * noise[i]
        # brain voxels stay strictly positive so the support is identical across sequences
        img = np.where(brain, np.maximum(img, 1e-3), 0.0) * INTENSITY_SCALE
        sequences[name] = Volume(img.astype(np.float32))
    labels = np.where(tumor, TUMOR_LABEL, 0).astype(np.uint16)
    return SequenceSet(case_id, sequences, LabelVolume(labels))


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_cases(n: int, shape=(32, 32, 32), seed: int = 0, **kwargs):
    specs = [PhantomSpec(tuple(shape), case_seed(seed, i), **kwargs) for i in range(n)]
    return [generate_case(s, f"PHANTOM-{i:05d}") for i, s in enumerate(specs)]


def radial_phantom(shape, width: float = 0.35) -> np.ndarray:
    """Smooth, spherically symmetric Gaussian blob with values in [0, 1]."""
    x, y, z = _grid(shape)
    s = width * min(shape)
    return np.exp(-(x**2 + y**2 + z**2) / (2 * s * s))
