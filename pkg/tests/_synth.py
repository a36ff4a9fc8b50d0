"""Synthetic image datasets for pipeline tests.

Feature vectors are rendered as block-constant images on a grid; the
stub-linear backbone reads the block means back, so a rendered dataset plus a
stub backbone forms a fully controlled extraction pipeline with no model
runtime. Rendering quantizes to 8-bit PNG, which costs at most 1/510 per
feature component.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from dfl.manifest import (
    DatasetManifest,
    SampleRecord,
    ViewSpec,
    write_manifest,
)


def default_view(name: str = "x20_rgb", size: int = 64) -> ViewSpec:
    return ViewSpec(
        name=name, zoom="x20", colorspace="rgb", target_size=size, resize_policy="resize"
    )


def render_feature_image(features: np.ndarray, grid: int, size: int) -> np.ndarray:
    """Block-constant (size, size, 3) float image encoding up to 3*grid**2 features.

    Feature order matches dfl.backbones.grid_features: (cell_row, cell_col,
    channel). Unused slots are mid-gray.
    """
    n_slots = 3 * grid * grid
    if len(features) > n_slots:
        raise ValueError(f"{len(features)} features exceed {n_slots} slots for grid {grid}")
    if size % grid:
        raise ValueError(f"size {size} not divisible by grid {grid}")
    flat = np.full(n_slots, 0.5)
    flat[: len(features)] = np.clip(features, 0.0, 1.0)
    cells = flat.reshape(grid, grid, 3)
    s = size // grid
    return np.repeat(np.repeat(cells, s, axis=0), s, axis=1)


def write_png(img01: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(img01, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def build_image_dataset(
    root: Path,
    classes: list[str],
    views: list[ViewSpec],
    labels: np.ndarray,
    features: dict[str, np.ndarray],
    splits: list[str] | None = None,
    grid: int = 4,
    name: str = "manifest.json",
) -> Path:
    """Render per-view feature matrices to PNGs and write a manifest.

    ``features[view_name]`` is an [n, d] matrix of values around 0.5 that
    becomes the block content of each sample's image for that view.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    n = len(labels)
    samples = []
    for i in range(n):
        view_paths = {}
        for view in views:
            img = render_feature_image(features[view.name][i], grid, view.target_size)
            rel = f"images/{i:05d}_{view.name}.png"
            write_png(img, root / rel)
            view_paths[view.name] = rel
        samples.append(
            SampleRecord(
                id=f"s{i:05d}",
                label=classes[int(labels[i])],
                view_paths=view_paths,
                split=splits[i] if splits else "train",
            )
        )
    manifest = DatasetManifest(version=1, classes=list(classes), views=list(views), samples=samples)
    path = root / name
    write_manifest(manifest, path)
    return path


def unit_centers(seed: int, num_classes: int, dim: int) -> np.ndarray:
    """Fixed class-center directions; share these across train/val/test draws."""
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(num_classes, dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def blob_features(
    rng: np.random.Generator,
    n_per_class: int,
    centers: np.ndarray,
    spread: float,
    noise: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian class blobs around 0.5 in feature space: (labels, features).

    Class centers sit at 0.5 + spread * centers[c]; samples add isotropic
    noise. Larger spread/noise ratios give cleaner separation.
    """
    num_classes = centers.shape[0]
    labels = np.repeat(np.arange(num_classes), n_per_class)
    feats = 0.5 + spread * centers[labels] + noise * rng.normal(size=(len(labels), centers.shape[1]))
    return labels, feats


def complementary_view_features(
    rng: np.random.Generator,
    n: int,
    dim: int,
    direction_seed: int = 0,
    signal: float = 0.25,
    noise: float = 0.10,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Binary task where each view carries half the signal.

    The label is sign(a + b) over two latent factors; view "va" renders only
    a (plus noise), view "vb" only b. Either view alone is weakly
    informative; their concatenation separates well. The rendering
    directions come from ``direction_seed`` so independent train/test draws
    stay mutually consistent.
    """
    a = rng.normal(size=n)
    b = rng.normal(size=n)
    labels = (a + b > 0).astype(np.int64)
    dirs = unit_centers(direction_seed, 2, dim)
    feats_a = 0.5 + signal * a[:, None] * dirs[0] + noise * rng.normal(size=(n, dim))
    feats_b = 0.5 + signal * b[:, None] * dirs[1] + noise * rng.normal(size=(n, dim))
    return labels, {"va": feats_a, "vb": feats_b}
