"""Samples, z-stacks, and manifests for ordinal focus data.

A z-stack is a focal series of grayscale planes for one field of view.
Planes are labeled with relative focus ranks (0 = best focus) derived
from the distance to the best-focus plane, and datasets are persisted
as a CSV manifest plus a small key-value metadata file.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


class ManifestError(ValidationError):
    """A manifest file is malformed or inconsistent."""


@dataclass(frozen=True)
class ZStack:
    """A focal series for one field of view.

    planes are H x W float arrays with values in [0, 1], ordered by
    z position; best_focus_index is the sharpest plane's index.
    """

    fov_id: str
    stain_id: int
    tissue: str
    planes: tuple
    best_focus_index: int

    def __post_init__(self):
        if len(self.planes) == 0:
            raise ValidationError("z-stack must contain at least one plane")
        if not (0 <= self.best_focus_index < len(self.planes)):
            raise ValidationError(
                f"best_focus_index {self.best_focus_index} out of range "
                f"for {len(self.planes)} planes"
            )
        shape = self.planes[0].shape
        for i, p in enumerate(self.planes):
            if p.shape != shape:
                raise ValidationError(
                    f"plane {i} has shape {p.shape}, expected {shape}"
                )


@dataclass(frozen=True)
class Sample:
    """One image plane with stain identity and ordinal focus rank."""

    image: np.ndarray
    stain_id: int
    rank: int
    fov_id: str
    z_index: int


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    stain: str
    tissue: str
    fov_id: str
    z_index: int
    rank: int


MANIFEST_COLUMNS = ("image_path", "stain", "tissue", "fov_id", "z_index", "rank")


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable index of a labeled dataset on disk."""

    entries: tuple
    stain_vocabulary: tuple
    num_levels: int
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        vocab = set(self.stain_vocabulary)
        if len(vocab) != len(self.stain_vocabulary):
            raise ManifestError("stain vocabulary contains duplicates")
        seen_paths = set()
        for i, e in enumerate(self.entries):
            if e.stain not in vocab:
                raise ManifestError(
                    f"entry {i}: stain {e.stain!r} not in vocabulary"
                )
            if not (0 <= e.rank < self.num_levels):
                raise ManifestError(
                    f"entry {i}: rank {e.rank} outside [0, {self.num_levels - 1}]"
                )
            if e.image_path in seen_paths:
                raise ManifestError(f"entry {i}: duplicate path {e.image_path!r}")
            seen_paths.add(e.image_path)

    def __len__(self):
        return len(self.entries)

    def stain_index(self, stain: str) -> int:
        return self.stain_vocabulary.index(stain)

    def with_entries(self, entries) -> "DatasetManifest":
        return replace(self, entries=tuple(entries))


def relabel_zstack(stack: ZStack, num_levels: int) -> list[int]:
    """Assign a relative focus rank to every plane of a stack.

    The distance from the best-focus plane is binned uniformly into
    num_levels levels: rank(z) = min(R-1, floor(|z - b| * R / (max_d + 1)))
    where max_d is the largest distance in the stack. Rank 0 is the
    best-focus plane; ranks never decrease with distance. When
    max_d >= num_levels - 1 the farthest plane receives the top rank.
    """
    if num_levels < 2:
        raise ValidationError(f"need at least 2 levels, got {num_levels}")
    n = len(stack.planes)
    b = stack.best_focus_index
    max_d = max(b, n - 1 - b)
    ranks = []
    for z in range(n):
        d = abs(z - b)
        ranks.append(min(num_levels - 1, math.floor(d * num_levels / (max_d + 1))))
    return ranks


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write a manifest CSV plus its sibling .meta key-value file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow(
                [e.image_path, e.stain, e.tissue, e.fov_id, e.z_index, e.rank]
            )
    meta_path = path.with_suffix(path.suffix + ".meta")
    with open(meta_path, "w", encoding="utf-8") as f:
        f.write(f"num_levels = {manifest.num_levels}\n")
        f.write(f"stain_vocabulary = {','.join(manifest.stain_vocabulary)}\n")


def _parse_meta(meta_path: Path) -> tuple[tuple, int]:
    values = {}
    with open(meta_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ManifestError(f"{meta_path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    try:
        num_levels = int(values["num_levels"])
        vocab = tuple(s for s in values["stain_vocabulary"].split(",") if s)
    except KeyError as exc:
        raise ManifestError(f"{meta_path}: missing key {exc}") from exc
    return vocab, num_levels


def load_manifest(path) -> DatasetManifest:
    """Load a manifest CSV and its sibling metadata file.

    Raises ManifestError naming the offending line on malformed rows,
    unknown stains, or out-of-range ranks.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    meta_path = path.with_suffix(path.suffix + ".meta")
    if not meta_path.exists():
        raise ManifestError(f"missing metadata file: {meta_path}")
    vocab, num_levels = _parse_meta(meta_path)

    entries = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}:1: empty manifest file") from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{path}:1: bad header {header!r}, expected {list(MANIFEST_COLUMNS)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, "
                    f"got {len(row)}"
                )
            image_path, stain, tissue, fov_id, z_index, rank = row
            try:
                entry = ManifestEntry(
                    image_path=image_path,
                    stain=stain,
                    tissue=tissue,
                    fov_id=fov_id,
                    z_index=int(z_index),
                    rank=int(rank),
                )
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            entries.append(entry)

    return DatasetManifest(
        entries=tuple(entries),
        stain_vocabulary=vocab,
        num_levels=num_levels,
        root=path.parent,
    )


def fewshot_sample(manifest: DatasetManifest, k: int, seed: int) -> DatasetManifest:
    """Sample exactly k entries per (stain, rank) cell, without replacement.

    Selection is uniform within each cell and deterministic for a fixed
    seed. A cell with fewer than k entries is an error naming the pair.
    """
    if k < 0:
        raise ValidationError(f"k must be >= 0, got {k}")
    if k == 0:
        return manifest.with_entries(())
    cells: dict[tuple, list] = {}
    for e in manifest.entries:
        cells.setdefault((e.stain, e.rank), []).append(e)
    rng = np.random.default_rng(seed)
    picked = []
    for stain in manifest.stain_vocabulary:
        for rank in range(manifest.num_levels):
            cell = cells.get((stain, rank), [])
            if len(cell) < k:
                raise ValidationError(
                    f"cell (stain={stain!r}, rank={rank}) has {len(cell)} "
                    f"entries, need {k}"
                )
            idx = rng.choice(len(cell), size=k, replace=False)
            picked.extend(cell[i] for i in sorted(idx))
    return manifest.with_entries(picked)


def split_by_fov(
    manifest: DatasetManifest, val_fraction: float, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split into train/val manifests, keeping each field of view intact.

    Per stain, a val_fraction share of FOVs (at least one when any exist)
    is held out, so no plane of a validation stack leaks into training.
    """
    if not (0.0 < val_fraction < 1.0):
        raise ValidationError(f"val_fraction must be in (0, 1), got {val_fraction}")
    by_stain: dict[str, list] = {}
    for e in manifest.entries:
        fovs = by_stain.setdefault(e.stain, [])
        if e.fov_id not in fovs:
            fovs.append(e.fov_id)
    rng = np.random.default_rng(seed)
    val_fovs = set()
    for stain in manifest.stain_vocabulary:
        fovs = by_stain.get(stain, [])
        if not fovs:
            continue
        n_val = max(1, round(len(fovs) * val_fraction))
        chosen = rng.choice(len(fovs), size=min(n_val, len(fovs)), replace=False)
        val_fovs.update((stain, fovs[i]) for i in chosen)
    train = [e for e in manifest.entries if (e.stain, e.fov_id) not in val_fovs]
    val = [e for e in manifest.entries if (e.stain, e.fov_id) in val_fovs]
    return manifest.with_entries(train), manifest.with_entries(val)


def save_image(image: np.ndarray, path) -> None:
    """Write a [0,1] float image as 16-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(image, 0.0, 1.0)
    data = np.round(arr * 65535.0).astype(np.uint16)
    Image.fromarray(data, mode="I;16").save(path)


def load_image(path) -> np.ndarray:
    """Read a grayscale image and normalize to [0,1] by its bit depth."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32):
        return arr.astype(np.float64) / 65535.0
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def resolve_image_path(manifest: DatasetManifest, entry: ManifestEntry) -> Path:
    p = Path(entry.image_path)
    return p if p.is_absolute() else manifest.root / p


def load_images(manifest: DatasetManifest) -> np.ndarray:
    """Load every manifest image into one (N, H, W) float array."""
    if not manifest.entries:
        raise ValidationError("manifest has no entries")
    images = [load_image(resolve_image_path(manifest, e)) for e in manifest.entries]
    return np.stack(images, axis=0)
