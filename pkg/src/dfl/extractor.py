"""Batched embedding extraction from a manifest into an embedding store.

Per-view preprocessing can run on worker threads, but images are consumed in
manifest order and inference batches are formed by sample position, so the
output store is byte-identical for any worker count. Embeddings are
L2-normalized per view before concatenation (configurable), keeping any
single view from dominating by scale. A failed image aborts the run with the
sample id; thanks to the store's atomic write, no partial store is left
behind.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbones import BackboneHandle
from .errors import ExtractionError, ImageError
from .imageprep import (
    PixelNormalization,
    load_image,
    normalize_pixels,
    pad_then_scale,
    resize,
    to_grayscale,
)
from .manifest import DatasetManifest, ViewSpec, manifest_digest
from .store import EmbeddingDataset, write_store

NORMALIZATION_MODES = ("l2", "none")


def normalize_embedding(v: np.ndarray) -> np.ndarray:
    """Scale to unit L2 norm; a zero vector signals a dead model output."""
    v = np.asarray(v)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ExtractionError("cannot normalize a zero embedding vector")
    return v / norm


def preprocess_view(
    path: str | Path,
    view: ViewSpec,
    norm: PixelNormalization,
    pad_fill: float = 1.0,
) -> np.ndarray:
    """Decode and prepare one image for the backbone: colorspace, size, pixels."""
    img = load_image(path)
    if view.colorspace == "grayscale":
        img = to_grayscale(img)
    if view.resize_policy == "pad_then_scale":
        img = pad_then_scale(img, view.target_size, fill=pad_fill)
    else:
        img = resize(img, view.target_size)
    return normalize_pixels(img, norm)


def extract(handle: BackboneHandle, batch: list[np.ndarray]) -> list[np.ndarray]:
    """One embedding per image, order preserved; empty batch gives an empty list."""
    if not batch:
        return []
    for i, img in enumerate(batch):
        if img.shape != (handle.input_size, handle.input_size, 3):
            raise ExtractionError(
                f"batch image {i}: shape {img.shape}, expected "
                f"({handle.input_size}, {handle.input_size}, 3)"
            )
    stacked = np.stack(batch).astype(np.float32)
    try:
        out = handle.run(stacked)
    except ExtractionError:
        raise
    except Exception as e:
        raise ExtractionError(f"inference failed on a batch of {len(batch)}: {e}") from e
    return [out[i] for i in range(out.shape[0])]


@dataclass(frozen=True)
class EmbeddingDatasetSummary:
    rows: int
    dim: int
    path: Path
    backbone_id: str
    views: tuple[str, ...]


def extract_dataset(
    manifest: DatasetManifest,
    handle: BackboneHandle,
    views: list[str],
    out: str | Path,
    batch_size: int = 32,
    workers: int = 1,
    normalization: str = "l2",
    pad_fill: float = 1.0,
) -> EmbeddingDatasetSummary:
    """Extract every sample's per-view embeddings and write one store.

    Rows follow manifest sample order; the concatenated dimension is
    embedding_dim * len(views) with views laid out in the given order.
    """
    if not views:
        raise ExtractionError("no views requested")
    declared = set(manifest.view_names)
    for name in views:
        if name not in declared:
            raise ExtractionError(f"view '{name}' not declared in manifest")
    if batch_size < 1:
        raise ExtractionError(f"batch_size must be >= 1, got {batch_size}")
    if workers < 1:
        raise ExtractionError(f"workers must be >= 1, got {workers}")
    if normalization not in NORMALIZATION_MODES:
        raise ExtractionError(
            f"normalization must be one of {NORMALIZATION_MODES}, got {normalization!r}"
        )
    view_specs = [manifest.view(name) for name in views]
    for spec in view_specs:
        if spec.target_size != handle.input_size:
            raise ExtractionError(
                f"view '{spec.name}' target_size {spec.target_size} does not match "
                f"backbone '{handle.id}' input_size {handle.input_size}"
            )

    samples = manifest.samples
    labels = np.array([manifest.class_index(s.label) for s in samples], dtype=np.uint32)

    per_view: list[np.ndarray] = []
    for spec in view_specs:
        paths = [manifest.resolve_path(s, spec.name) for s in samples]
        block = np.empty((len(samples), handle.embedding_dim), dtype=np.float32)
        row = 0
        with ThreadPoolExecutor(max_workers=workers) as pool:
            prepped = pool.map(
                lambda p: preprocess_view(p, spec, handle.normalization, pad_fill), paths
            )
            batch: list[np.ndarray] = []
            try:
                for img in prepped:
                    batch.append(img)
                    if len(batch) == batch_size:
                        for vec in extract(handle, batch):
                            block[row] = vec
                            row += 1
                        batch = []
            except ImageError as e:
                raise ExtractionError(
                    f"sample '{samples[row + len(batch)].id}', view '{spec.name}': {e}"
                ) from e
        for vec in extract(handle, batch):
            block[row] = vec
            row += 1

        if normalization == "l2":
            norms = np.linalg.norm(block.astype(np.float64), axis=1)
            dead = np.nonzero(norms == 0.0)[0]
            if dead.size:
                raise ExtractionError(
                    f"sample '{samples[int(dead[0])].id}', view '{spec.name}': zero embedding"
                )
            block = (block.astype(np.float64) / norms[:, None]).astype(np.float32)
        per_view.append(block)

    data = per_view[0] if len(per_view) == 1 else np.hstack(per_view)
    provenance = {
        "backbone_id": handle.id,
        "views": [spec.to_dict() for spec in view_specs],
        "normalization": normalization,
        "manifest_hash": manifest_digest(manifest),
        "classes": list(manifest.classes),
    }
    ds = EmbeddingDataset(data=data, labels=labels, provenance=provenance)
    out = Path(out)
    write_store(ds, out)
    return EmbeddingDatasetSummary(
        rows=ds.rows,
        dim=ds.dim,
        path=out,
        backbone_id=handle.id,
        views=tuple(views),
    )
