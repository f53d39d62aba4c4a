"""Voxel grid containers and the raw+sidecar on-disk volume format.

Every volume in the toolkit is a 3D scalar grid with per-axis physical
spacing in mm, axis order (depth, height, width). Grids are immutable
after construction and safe to share across workers.

On disk a grid is two files: ``<name>.raw`` holding the little-endian
C-order array, and ``<name>.json`` holding
``{"shape", "spacing_mm", "dtype", "order"}`` with dtype ``f32`` or
``u8``. Binary masks are stored as ``u8``, everything else as ``f32``;
round trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "VoxelGrid",
    "BinaryMask",
    "SoftMask",
    "DistanceMap",
    "binarize",
    "save_grid",
    "load_grid",
]

_SIDECAR_KEYS = {"shape", "spacing_mm", "dtype", "order"}


def _freeze(values: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(values, dtype=np.float32)
    if out is values:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Immutable 3D float32 grid with physical voxel spacing in mm."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"expected a 3D array, got ndim={values.ndim}")
        if min(values.shape) < 1:
            raise ValueError(f"every dimension must be >= 1, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("grid values must be finite (no NaN/Inf)")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive scalars, got {self.spacing!r}")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "spacing", spacing)
        self._check_values()

    def _check_values(self) -> None:
        """Subclass hook for extra value constraints."""

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def voxel_volume_mm3(self) -> float:
        return float(self.spacing[0] * self.spacing[1] * self.spacing[2])

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.spacing == other.spacing
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self):
        return hash((self.shape, self.spacing, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, spacing={self.spacing})"


class BinaryMask(VoxelGrid):
    """Grid whose voxels are exactly 0 or 1."""

    def _check_values(self) -> None:
        bad = (self.values != 0) & (self.values != 1)
        if bad.any():
            raise ValueError(f"mask contains {int(bad.sum())} voxels outside {{0, 1}}")

    def astype_bool(self) -> np.ndarray:
        return self.values != 0

    @property
    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.values))


class SoftMask(VoxelGrid):
    """Grid of probabilities in [0, 1]."""

    def _check_values(self) -> None:
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValueError(
                f"soft mask values must lie in [0, 1], got range "
                f"[{self.values.min():.4g}, {self.values.max():.4g}]"
            )


class DistanceMap(VoxelGrid):
    """Nonnegative per-voxel distances in mm."""

    def _check_values(self) -> None:
        if self.values.min() < 0:
            raise ValueError(f"distance map has negative values (min {self.values.min():.4g})")


def binarize(soft: VoxelGrid, threshold: float) -> BinaryMask:
    """Threshold a probability grid: voxel -> 1 iff value >= threshold.

    Idempotent on already-binary grids for any threshold in (0, 1].
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    if soft.values.min() < 0 or soft.values.max() > 1:
        raise ValueError("binarize expects values in [0, 1]")
    return BinaryMask((soft.values >= threshold).astype(np.float32), soft.spacing)


def _paths_for(path) -> tuple[Path, Path]:
    raw = Path(path)
    if raw.suffix != ".raw":
        raw = raw.with_suffix(".raw")
    return raw, raw.with_suffix(".json")


def save_grid(grid: VoxelGrid, path) -> Path:
    """Write ``<path>.raw`` + ``<path>.json``; returns the raw path.

    Masks go to disk as u8, everything else as little-endian f32.
    """
    raw_path, sidecar_path = _paths_for(path)
    if isinstance(grid, BinaryMask):
        data = grid.values.astype(np.uint8)
        dtype = "u8"
    else:
        data = grid.values.astype("<f4")
        dtype = "f32"
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(np.ascontiguousarray(data).tobytes())
    sidecar = {
        "shape": list(grid.shape),
        "spacing_mm": list(grid.spacing),
        "dtype": dtype,
        "order": "C",
    }
    sidecar_path.write_text(json.dumps(sidecar, indent=1) + "\n")
    return raw_path


def load_grid(path) -> VoxelGrid:
    """Read a raw+sidecar volume; u8 payloads come back as BinaryMask."""
    raw_path, sidecar_path = _paths_for(path)
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed sidecar {sidecar_path}: {exc}") from exc
    if not isinstance(sidecar, dict) or not _SIDECAR_KEYS.issubset(sidecar):
        raise ValueError(f"sidecar {sidecar_path} is missing keys {_SIDECAR_KEYS - set(sidecar)}")
    if sidecar.get("order") != "C":
        raise ValueError(f"unsupported array order {sidecar.get('order')!r}")
    shape = tuple(int(s) for s in sidecar["shape"])
    if len(shape) != 3:
        raise ValueError(f"sidecar shape must have 3 dims, got {sidecar['shape']!r}")
    spacing = tuple(float(s) for s in sidecar["spacing_mm"])
    dtype_tag = sidecar["dtype"]
    if dtype_tag == "f32":
        np_dtype, itemsize = np.dtype("<f4"), 4
    elif dtype_tag == "u8":
        np_dtype, itemsize = np.dtype("u1"), 1
    else:
        raise ValueError(f"unknown dtype tag {dtype_tag!r} in {sidecar_path}")
    blob = raw_path.read_bytes()
    expected = int(np.prod(shape)) * itemsize
    if len(blob) != expected:
        raise ValueError(
            f"{raw_path}: raw payload is {len(blob)} bytes but sidecar shape "
            f"{shape} needs {expected}"
        )
    values = np.frombuffer(blob, dtype=np_dtype).reshape(shape)
    if dtype_tag == "u8":
        return BinaryMask(values.astype(np.float32), spacing)
    return VoxelGrid(values, spacing)
