"""Bit-exact on-disk format for embedding datasets ("DFLB").

Layout, all little-endian:

    magic "DFLB" | u16 version=1 | u16 dtype (1 = float32) | u32 dim | u64 rows
    | rows*dim float32 data | rows u32 labels | u32 blob_len | provenance JSON

Labels live inside the store so label/row misalignment is structurally
impossible. Writes are atomic (temp file + rename); files are immutable after
creation and safe for concurrent readers.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StoreError

MAGIC = b"DFLB"
STORE_VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sHHIQ")


@dataclass
class EmbeddingDataset:
    """Row-major float32 embedding matrix with aligned integer labels.

    Provenance records at least the backbone id, the view composition, the
    normalization mode, the source-manifest hash, and the class list that the
    labels index into.
    """

    data: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def validate(self) -> None:
        if self.data.ndim != 2:
            raise StoreError(f"data must be 2-D, got shape {self.data.shape}")
        if self.dim < 1:
            raise StoreError("embedding dimension must be positive")
        if self.labels.shape != (self.rows,):
            raise StoreError(
                f"labels length {self.labels.shape} does not match {self.rows} rows"
            )
        if not np.all(np.isfinite(self.data)):
            raise StoreError("data contains non-finite values")
        classes = self.provenance.get("classes")
        if not classes:
            raise StoreError("provenance must record the class list under 'classes'")
        if self.rows and int(self.labels.max()) >= len(classes):
            raise StoreError(
                f"label {int(self.labels.max())} out of range for {len(classes)} classes"
            )

    @property
    def num_classes(self) -> int:
        return len(self.provenance.get("classes", ()))


def write_store(ds: EmbeddingDataset, path: str | Path) -> None:
    """Validate and write atomically; no partial file is ever visible at ``path``."""
    ds.validate()
    path = Path(path)
    blob = json.dumps(ds.provenance, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _HEADER.pack(MAGIC, STORE_VERSION, DTYPE_F32, ds.dim, ds.rows)

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(ds.data.astype("<f4", copy=False).tobytes())
            f.write(ds.labels.astype("<u4", copy=False).tobytes())
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except OSError as e:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise StoreError(f"failed to write store {path}: {e}") from e


def read_store(path: str | Path) -> EmbeddingDataset:
    """Read a store; bitwise inverse of :func:`write_store`."""
    path = Path(path)
    if not path.is_file():
        raise StoreError(f"store file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise StoreError(f"{path}: truncated header")
    magic, version, dtype, dim, rows = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise StoreError(f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise StoreError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise StoreError(f"{path}: unsupported dtype code {dtype}")

    off = _HEADER.size
    data_bytes = rows * dim * 4
    label_bytes = rows * 4
    if len(raw) < off + data_bytes + label_bytes + 4:
        raise StoreError(f"{path}: truncated file (expected at least "
                         f"{off + data_bytes + label_bytes + 4} bytes, got {len(raw)})")
    data = np.frombuffer(raw, dtype="<f4", count=rows * dim, offset=off).reshape(rows, dim)
    off += data_bytes
    labels = np.frombuffer(raw, dtype="<u4", count=rows, offset=off)
    off += label_bytes
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) != off + blob_len:
        raise StoreError(f"{path}: provenance blob length mismatch")
    try:
        provenance = json.loads(raw[off : off + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StoreError(f"{path}: malformed provenance blob: {e}") from e
    return EmbeddingDataset(data=data.copy(), labels=labels.copy(), provenance=provenance)


def concat_stores(parts: list[EmbeddingDataset]) -> EmbeddingDataset:
    """Column-concatenate per-view datasets extracted from the same manifest.

    All parts must agree on row count, labels, class list, and manifest hash;
    a mismatch means a view was extracted against a different manifest.
    Associative over the list argument.
    """
    if not parts:
        raise StoreError("concat_stores needs at least one part")
    first = parts[0]
    for i, p in enumerate(parts[1:], start=1):
        if p.rows != first.rows:
            raise StoreError(f"part {i}: row count {p.rows} != {first.rows}")
        if not np.array_equal(p.labels, first.labels):
            raise StoreError(f"part {i}: labels differ from part 0")
        if p.provenance.get("classes") != first.provenance.get("classes"):
            raise StoreError(f"part {i}: class list differs from part 0")
        if p.provenance.get("manifest_hash") != first.provenance.get("manifest_hash"):
            raise StoreError(f"part {i}: manifest hash differs from part 0")
    if len(parts) == 1:
        return EmbeddingDataset(first.data.copy(), first.labels.copy(), dict(first.provenance))

    backbone_ids = [p.provenance.get("backbone_id", "?") for p in parts]
    norms = {p.provenance.get("normalization", "?") for p in parts}
    views: list = []
    for p in parts:
        views.extend(p.provenance.get("views", []))
    provenance = dict(first.provenance)
    provenance.update(
        backbone_id="+".join(dict.fromkeys(backbone_ids)),
        views=views,
        normalization=norms.pop() if len(norms) == 1 else "mixed",
    )
    return EmbeddingDataset(
        data=np.hstack([p.data for p in parts]),
        labels=first.labels.copy(),
        provenance=provenance,
    )


def feature_stats(ds: EmbeddingDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std (float64) of a training store, for z-scoring."""
    if ds.rows == 0:
        raise StoreError("cannot compute feature statistics of an empty store")
    x = ds.data.astype(np.float64)
    return x.mean(axis=0), x.std(axis=0)


def apply_feature_zscore(
    ds: EmbeddingDataset, mean: np.ndarray, std: np.ndarray, eps: float = 1e-12
) -> EmbeddingDataset:
    """Standardize features with train-split statistics (zero-variance guarded)."""
    x = (ds.data.astype(np.float64) - mean) / np.maximum(std, eps)
    provenance = dict(ds.provenance)
    provenance["normalization"] = "zscore"
    return EmbeddingDataset(x.astype(np.float32), ds.labels.copy(), provenance)
