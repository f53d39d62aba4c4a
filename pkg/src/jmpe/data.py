"""Dataset manifest loading shared by the training stages and the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .grids import BinaryMask, VoxelGrid, load_grid

__all__ = ["ManifestEntry", "load_manifest", "load_pair"]


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    seed: int | None
    image: Path
    mask: Path
    tree: Path | None = None


def load_manifest(path) -> list[ManifestEntry]:
    """Read a JSON-list manifest; relative paths resolve against its directory."""
    manifest_path = Path(path)
    base = manifest_path.parent
    raw = json.loads(manifest_path.read_text())
    if not isinstance(raw, list):
        raise ValueError(f"manifest {manifest_path} must be a JSON list")
    entries = []
    for i, item in enumerate(raw):
        try:
            entries.append(ManifestEntry(
                id=str(item["id"]),
                seed=int(item["seed"]) if "seed" in item else None,
                image=base / item["image"],
                mask=base / item["mask"],
                tree=base / item["tree"] if item.get("tree") else None,
            ))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"manifest entry {i} is malformed: {exc}") from exc
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest contains duplicate sample ids")
    return entries


def load_pair(entry: ManifestEntry) -> tuple[VoxelGrid, BinaryMask]:
    image = load_grid(entry.image)
    mask = load_grid(entry.mask)
    if not isinstance(mask, BinaryMask):
        raise ValueError(f"{entry.mask} is not a binary (u8) volume")
    if image.shape != mask.shape or image.spacing != mask.spacing:
        raise ValueError(f"sample {entry.id}: image and mask geometry differ")
    return image, mask
