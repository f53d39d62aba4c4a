"""Procedural vascular-tree phantoms: binary masks plus synthetic contrast images.

A phantom is a recursive bifurcating tube tree voxelized onto a grid.
Radii shrink geometrically per bifurcation generation, so one parameter
controls the multi-scale caliber range. The paired image is the mask
intensity plateau blurred, corrupted with Gaussian noise and a
low-frequency background field, then clipped to [0, 1].

Everything is driven by a single seed; the draw order of the RNG is part
of the format, so identical specs give bit-identical samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .grids import BinaryMask, VoxelGrid, save_grid

__all__ = ["TreeSpec", "Branch", "PhantomSample", "generate_tree", "make_dataset"]

# image model constants: plateau contrast, blur and noise per the phantom recipe
_BACKGROUND_LEVEL = 0.2
_VESSEL_CONTRAST = 0.6
_BLUR_SIGMA_VOX = 0.8
_NOISE_FRACTION = 0.10
_LOWFREQ_AMPLITUDE = 0.08
_LOWFREQ_SIGMA_FRACTION = 0.25
_MIN_RADIUS_VOX = 1.0
_MIN_SEGMENT_VOX = 2.0


@dataclass(frozen=True)
class TreeSpec:
    """Parameters of one synthetic tree; the seed pins every random draw."""

    seed: int
    depth: int = 4
    root_radius_vox: float = 3.0
    radius_decay: float = 0.8
    branch_angle_range: tuple[float, float] = (0.35, 0.9)
    segment_length_range: tuple[float, float] = (7.0, 12.0)
    grid_shape: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.root_radius_vox < 1:
            raise ValueError(f"root_radius_vox must be >= 1, got {self.root_radius_vox}")
        if not 0.0 < self.radius_decay < 1.0:
            raise ValueError(f"radius_decay must be in (0, 1), got {self.radius_decay}")
        lo, hi = self.branch_angle_range
        if not 0.0 <= lo <= hi:
            raise ValueError(f"bad branch_angle_range {self.branch_angle_range}")
        lo, hi = self.segment_length_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad segment_length_range {self.segment_length_range}")
        if len(self.grid_shape) != 3 or min(self.grid_shape) < 4:
            raise ValueError(f"grid_shape must be 3 dims of >= 4 voxels, got {self.grid_shape}")
        if min(self.grid_shape) <= 2 * self.root_radius_vox + 2:
            raise ValueError(
                f"grid {self.grid_shape} too small to contain a radius-"
                f"{self.root_radius_vox} root tube"
            )


@dataclass(frozen=True)
class Branch:
    """One tube segment of the tree, in voxel (index-space) coordinates."""

    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: float
    generation: int


@dataclass(frozen=True)
class PhantomSample:
    image: VoxelGrid
    mask: BinaryMask
    tree_meta: tuple[Branch, ...]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _perpendicular(direction: np.ndarray) -> np.ndarray:
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(direction)))] = 1.0
    return _unit(np.cross(direction, axis))


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    # Rodrigues' formula
    axis = _unit(axis)
    return (
        v * np.cos(angle)
        + np.cross(axis, v) * np.sin(angle)
        + axis * np.dot(axis, v) * (1.0 - np.cos(angle))
    )


def _tilted(direction: np.ndarray, polar: float, azimuth: float) -> np.ndarray:
    """Rotate `direction` away from itself by `polar`, around it by `azimuth`."""
    perp = _rotate(_perpendicular(direction), direction, azimuth)
    return _unit(_rotate(direction, perp, polar))


def _clip_to_bounds(start: np.ndarray, direction: np.ndarray, length: float,
                    shape: tuple[int, int, int]) -> float:
    """Largest usable length so the segment end stays inside the voxel box."""
    lo, hi = 1.0, np.asarray(shape, dtype=float) - 2.0
    t_max = length
    for ax in range(3):
        d = direction[ax]
        if d > 1e-12:
            t_max = min(t_max, (hi[ax] - start[ax]) / d)
        elif d < -1e-12:
            t_max = min(t_max, (lo - start[ax]) / d)
    return max(t_max, 0.0)


def _grow(spec: TreeSpec, rng: np.random.Generator) -> list[Branch]:
    shape = spec.grid_shape
    start = np.array([
        2.0,
        shape[1] / 2.0 + rng.uniform(-1.5, 1.5),
        shape[2] / 2.0 + rng.uniform(-1.5, 1.5),
    ])
    tilt = rng.uniform(-0.2, 0.2, size=2)
    direction = _unit(np.array([1.0, tilt[0], tilt[1]]))
    branches: list[Branch] = []
    _grow_segment(spec, rng, start, direction, generation=0, branches=branches)
    return branches


def _grow_segment(spec: TreeSpec, rng: np.random.Generator, start: np.ndarray,
                  direction: np.ndarray, generation: int, branches: list[Branch]) -> None:
    length = rng.uniform(*spec.segment_length_range)
    length = _clip_to_bounds(start, direction, length, spec.grid_shape)
    if length < _MIN_SEGMENT_VOX:
        return
    radius = max(spec.root_radius_vox * spec.radius_decay**generation, _MIN_RADIUS_VOX)
    end = start + direction * length
    branches.append(Branch(tuple(start), tuple(end), float(radius), generation))
    if generation + 1 >= spec.depth:
        return
    first_azimuth = rng.uniform(0.0, 2.0 * np.pi)
    for child in range(2):
        polar = rng.uniform(*spec.branch_angle_range)
        azimuth = first_azimuth + child * (np.pi + rng.uniform(-0.5, 0.5))
        child_dir = _tilted(direction, polar, azimuth)
        _grow_segment(spec, rng, end, child_dir, generation + 1, branches)


def _paint_tube(mask: np.ndarray, branch: Branch) -> None:
    a = np.asarray(branch.start)
    b = np.asarray(branch.end)
    r = branch.radius
    lo = np.maximum(np.floor(np.minimum(a, b) - r - 1), 0).astype(int)
    hi = np.minimum(np.ceil(np.maximum(a, b) + r + 1) + 1, mask.shape).astype(int)
    grids = np.meshgrid(*(np.arange(lo[ax], hi[ax]) for ax in range(3)), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1).astype(float)
    ab = b - a
    denom = float(np.dot(ab, ab))
    t = np.clip((pts - a) @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(pts))
    closest = a + t[:, None] * ab
    inside = np.linalg.norm(pts - closest, axis=1) <= r
    box = mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    box |= inside.reshape(box.shape)


def segment_point_distances(points: np.ndarray, branch: Branch) -> np.ndarray:
    """Distance of index-space points to a branch centerline (test oracle hook)."""
    a = np.asarray(branch.start)
    b = np.asarray(branch.end)
    ab = b - a
    denom = float(np.dot(ab, ab))
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(points))
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def _synthesize_image(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    base = _BACKGROUND_LEVEL + _VESSEL_CONTRAST * mask.astype(np.float64)
    img = gaussian_filter(base, sigma=_BLUR_SIGMA_VOX)
    img += rng.normal(0.0, _NOISE_FRACTION * _VESSEL_CONTRAST, size=mask.shape)
    lowfreq = gaussian_filter(rng.normal(0.0, 1.0, size=mask.shape),
                              sigma=_LOWFREQ_SIGMA_FRACTION * min(mask.shape))
    peak = np.abs(lowfreq).max()
    if peak > 0:
        img += lowfreq * (_LOWFREQ_AMPLITUDE / peak)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_tree(spec: TreeSpec) -> PhantomSample:
    """Deterministically voxelize one bifurcating tube tree and its image."""
    rng = np.random.default_rng(spec.seed)
    branches = _grow(spec, rng)
    if not branches:
        raise ValueError("tree generation produced no segments; grid too small for the spec")
    mask = np.zeros(spec.grid_shape, dtype=bool)
    for branch in branches:
        _paint_tube(mask, branch)
    image = _synthesize_image(mask, rng)
    return PhantomSample(
        image=VoxelGrid(image, spec.spacing),
        mask=BinaryMask(mask.astype(np.float32), spec.spacing),
        tree_meta=tuple(branches),
    )


def _branch_to_dict(branch: Branch) -> dict:
    return {
        "start": list(branch.start),
        "end": list(branch.end),
        "radius": branch.radius,
        "generation": branch.generation,
    }


def branch_from_dict(d: dict) -> Branch:
    return Branch(tuple(d["start"]), tuple(d["end"]), float(d["radius"]), int(d["generation"]))


def make_dataset(spec_template: TreeSpec, n: int, seed: int, out_dir) -> Path:
    """Write n phantoms with seeds seed..seed+n-1; returns the manifest path.

    The manifest is a JSON list of ``{id, seed, image, mask, tree}`` with
    paths relative to the manifest directory.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        sample_seed = seed + i
        sample_id = f"sample_{i:04d}"
        try:
            sample = generate_tree(replace(spec_template, seed=sample_seed))
            save_grid(sample.image, out / f"{sample_id}_image.raw")
            save_grid(sample.mask, out / f"{sample_id}_mask.raw")
            tree_path = out / f"{sample_id}_tree.json"
            tree_path.write_text(
                json.dumps([_branch_to_dict(b) for b in sample.tree_meta], indent=1) + "\n"
            )
        except OSError as exc:
            raise OSError(f"failed writing sample index {i} ({sample_id}): {exc}") from exc
        entries.append({
            "id": sample_id,
            "seed": sample_seed,
            "image": f"{sample_id}_image.raw",
            "mask": f"{sample_id}_mask.raw",
            "tree": f"{sample_id}_tree.json",
        })
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(entries, indent=1) + "\n")
    return manifest_path
