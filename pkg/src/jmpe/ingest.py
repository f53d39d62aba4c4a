"""Preprocessing for contrast-enhanced CT volumes.

Pipeline: resample to a target spacing (trilinear for images,
nearest-neighbor for masks), crop to the region-of-interest bounding box
plus a margin, clip intensities to a fixed window and rescale to [0, 1].
The default window is (-150, 250) HU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .grids import BinaryMask, VoxelGrid

__all__ = [
    "PreprocessSpec",
    "resample",
    "crop_to_roi",
    "clip_intensities",
    "median_spacing",
]

DEFAULT_CLIP_WINDOW = (-150.0, 250.0)


@dataclass(frozen=True)
class PreprocessSpec:
    """Declarative preprocessing parameters for one cohort."""

    target_spacing: tuple[float, float, float] | str = "median-of-train-fold"
    clip_window: tuple[float, float] = DEFAULT_CLIP_WINDOW
    crop_margin_vox: int = 4

    def __post_init__(self):
        lo, hi = self.clip_window
        if not lo < hi:
            raise ValueError(f"clip window must satisfy lo < hi, got {self.clip_window}")
        if self.crop_margin_vox < 0:
            raise ValueError(f"crop margin must be >= 0, got {self.crop_margin_vox}")
        if isinstance(self.target_spacing, str):
            if self.target_spacing != "median-of-train-fold":
                raise ValueError(f"unknown target_spacing policy {self.target_spacing!r}")
        elif len(self.target_spacing) != 3 or any(s <= 0 for s in self.target_spacing):
            raise ValueError(f"target_spacing must be 3 positive values, got {self.target_spacing}")


def median_spacing(spacings) -> tuple[float, float, float]:
    """Per-axis median over a collection of spacings (compute on the train fold only)."""
    arr = np.asarray(list(spacings), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
        raise ValueError("median_spacing expects a nonempty list of (3,) spacings")
    med = np.median(arr, axis=0)
    return (float(med[0]), float(med[1]), float(med[2]))


def resample(grid: VoxelGrid, target_spacing) -> VoxelGrid:
    """Resample onto target spacing; masks use nearest-neighbor, images trilinear.

    Output shape is round(shape * spacing / target_spacing) per axis; the
    value at output voxel j is interpolated at physical position j * target.
    """
    target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if target == grid.spacing:
        return grid
    src = np.asarray(grid.spacing)
    tgt = np.asarray(target)
    out_shape = np.round(np.asarray(grid.shape) * src / tgt).astype(int)
    if (out_shape < 1).any():
        raise ValueError(
            f"resampling {grid.shape} from {grid.spacing} to {target} collapses "
            f"to degenerate shape {tuple(out_shape)}"
        )
    axes = [np.arange(n) * tgt[ax] / src[ax] for ax, n in enumerate(out_shape)]
    coords = np.meshgrid(*axes, indexing="ij")
    order = 0 if isinstance(grid, BinaryMask) else 1
    values = map_coordinates(
        grid.values.astype(np.float64), np.stack(coords), order=order, mode="nearest"
    ).astype(np.float32)
    return type(grid)(values, target)


def crop_to_roi(grid: VoxelGrid, roi_mask: BinaryMask, margin: int = 0) -> VoxelGrid:
    """Crop to the ROI's tight bounding box dilated by `margin`, clamped to bounds."""
    if roi_mask.shape != grid.shape or roi_mask.spacing != grid.spacing:
        raise ValueError(
            f"ROI geometry {roi_mask.shape}/{roi_mask.spacing} does not match "
            f"grid {grid.shape}/{grid.spacing}"
        )
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    fg = np.argwhere(roi_mask.astype_bool())
    if fg.size == 0:
        raise ValueError("ROI mask is empty; nothing to crop to")
    lo = np.maximum(fg.min(axis=0) - margin, 0)
    hi = np.minimum(fg.max(axis=0) + margin + 1, grid.shape)
    window = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    return type(grid)(grid.values[window], grid.spacing)


def clip_intensities(grid: VoxelGrid, lo: float, hi: float) -> VoxelGrid:
    """Clamp to [lo, hi], then map that window affinely onto [0, 1]."""
    if not lo < hi:
        raise ValueError(f"clip window must satisfy lo < hi, got ({lo}, {hi})")
    clipped = np.clip(grid.values.astype(np.float64), lo, hi)
    scaled = (clipped - lo) / (hi - lo)
    return VoxelGrid(scaled.astype(np.float32), grid.spacing)
