"""Paired image/mask augmentation with a fixed draw order.

Geometric transforms (axis-aligned 90-degree rotations, axis flips,
integer translations with zero padding) apply identically to image and
mask; gamma correction perturbs the image only. Masks stay strictly
binary. Arbitrary-angle rotation is available behind `free_rotation`;
it interpolates, so the mask is re-binarized at 0.5 afterwards.

The RNG draw order is fixed (rotation, flips, translation, gamma, free
rotation), so a seed fully determines the output pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import rotate as _nd_rotate

from .grids import BinaryMask, VoxelGrid

__all__ = ["AugmentSpec", "augment"]

_AXIS_PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class AugmentSpec:
    p_rot90: float = 0.5
    p_flip: float = 0.5
    p_translate: float = 0.5
    p_gamma: float = 0.5
    max_shift_vox: int = 2
    gamma_range: tuple[float, float] = (0.7, 1.5)
    free_rotation: bool = False
    p_free_rotation: float = 0.5
    max_angle_deg: float = 15.0

    def __post_init__(self):
        for name in ("p_rot90", "p_flip", "p_translate", "p_gamma", "p_free_rotation"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.max_shift_vox < 0:
            raise ValueError(f"max_shift_vox must be >= 0, got {self.max_shift_vox}")
        lo, hi = self.gamma_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad gamma_range {self.gamma_range}")


def _translate(values: np.ndarray, shifts) -> np.ndarray:
    out = np.zeros_like(values)
    src = []
    dst = []
    for size, shift in zip(values.shape, shifts):
        shift = int(shift)
        if abs(shift) >= size:
            return out
        if shift >= 0:
            src.append(slice(0, size - shift))
            dst.append(slice(shift, size))
        else:
            src.append(slice(-shift, size))
            dst.append(slice(0, size + shift))
    out[tuple(dst)] = values[tuple(src)]
    return out


def augment(image: VoxelGrid, mask: BinaryMask, seed,
            spec: AugmentSpec = AugmentSpec()) -> tuple[VoxelGrid, BinaryMask]:
    """Randomly transform a paired image and mask; returns new grids."""
    if image.shape != mask.shape or image.spacing != mask.spacing:
        raise ValueError("image and mask must share geometry")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    img = image.values.copy()
    msk = mask.values.copy()

    if rng.uniform() < spec.p_rot90:
        axes = _AXIS_PAIRS[rng.integers(0, len(_AXIS_PAIRS))]
        k = int(rng.integers(1, 4))
        # rotating a plane is only geometry-preserving when both axes match
        if image.shape[axes[0]] == image.shape[axes[1]] \
                and image.spacing[axes[0]] == image.spacing[axes[1]]:
            img = np.rot90(img, k=k, axes=axes).copy()
            msk = np.rot90(msk, k=k, axes=axes).copy()
    for axis in range(3):
        if rng.uniform() < spec.p_flip:
            img = np.flip(img, axis=axis).copy()
            msk = np.flip(msk, axis=axis).copy()
    if rng.uniform() < spec.p_translate and spec.max_shift_vox > 0:
        shifts = rng.integers(-spec.max_shift_vox, spec.max_shift_vox + 1, size=3)
        img = _translate(img, shifts)
        msk = _translate(msk, shifts)
    if rng.uniform() < spec.p_gamma:
        gamma = rng.uniform(*spec.gamma_range)
        img = np.clip(img, 0.0, None) ** gamma
    if spec.free_rotation and rng.uniform() < spec.p_free_rotation:
        angle = rng.uniform(-spec.max_angle_deg, spec.max_angle_deg)
        axes = _AXIS_PAIRS[rng.integers(0, len(_AXIS_PAIRS))]
        img = _nd_rotate(img, angle, axes=axes, reshape=False, order=1, mode="nearest")
        msk = _nd_rotate(msk, angle, axes=axes, reshape=False, order=1, mode="constant")
        msk = (msk >= 0.5).astype(np.float32)

    return (
        VoxelGrid(img.astype(np.float32), image.spacing),
        BinaryMask(msk.astype(np.float32), mask.spacing),
    )
