"""Dataset manifests: samples, labels, and the image views each sample provides.

A manifest is a single JSON document referencing image files on disk; image
bytes never enter the manifest. Class index is position in the class list so
the label encoding is reproducible. Sample order is preserved exactly as in
the file and iteration over it is stable across process runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ManifestError

ZOOMS = ("x20", "x5")
COLORSPACES = ("rgb", "grayscale")
RESIZE_POLICIES = ("resize", "pad_then_scale")
SPLITS = ("train", "validation", "test")

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ViewSpec:
    """One named rendering of a sample: zoom level, colorspace, size policy."""

    name: str
    zoom: str
    colorspace: str
    target_size: int
    resize_policy: str

    def validate(self) -> None:
        if not self.name:
            raise ManifestError("view name must be a non-empty string")
        if self.zoom not in ZOOMS:
            raise ManifestError(f"view '{self.name}': zoom must be one of {ZOOMS}, got {self.zoom!r}")
        if self.colorspace not in COLORSPACES:
            raise ManifestError(
                f"view '{self.name}': colorspace must be one of {COLORSPACES}, got {self.colorspace!r}"
            )
        if not isinstance(self.target_size, int) or self.target_size <= 0:
            raise ManifestError(f"view '{self.name}': target_size must be a positive integer")
        if self.resize_policy not in RESIZE_POLICIES:
            raise ManifestError(
                f"view '{self.name}': resize_policy must be one of {RESIZE_POLICIES}, got {self.resize_policy!r}"
            )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "zoom": self.zoom,
            "colorspace": self.colorspace,
            "target_size": self.target_size,
            "resize_policy": self.resize_policy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViewSpec":
        try:
            return cls(
                name=d["name"],
                zoom=d["zoom"],
                colorspace=d["colorspace"],
                target_size=d["target_size"],
                resize_policy=d["resize_policy"],
            )
        except KeyError as e:
            raise ManifestError(f"view entry missing key {e.args[0]!r}") from e


@dataclass(frozen=True)
class SampleRecord:
    """One labeled sample and the image path for each of its views."""

    id: str
    label: str
    view_paths: dict[str, str]
    split: str = "train"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "split": self.split,
            "views": dict(self.view_paths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        try:
            return cls(
                id=d["id"],
                label=d["label"],
                view_paths=dict(d["views"]),
                split=d.get("split", "train"),
            )
        except KeyError as e:
            raise ManifestError(f"sample entry missing key {e.args[0]!r}: {d!r}") from e


@dataclass
class DatasetManifest:
    """Validated collection of classes, view declarations, and samples.

    ``root`` is the directory the manifest was loaded from; relative image
    paths resolve against it. It is not serialized and does not participate
    in equality.
    """

    version: int
    classes: list[str]
    views: list[ViewSpec]
    samples: list[SampleRecord]
    root: Path | None = field(default=None, compare=False)

    def validate(self) -> None:
        if not isinstance(self.version, int):
            raise ManifestError("manifest version must be an integer")
        if not self.classes:
            raise ManifestError("manifest declares no classes")
        if len(set(self.classes)) != len(self.classes):
            raise ManifestError("manifest class list contains duplicates")
        if not self.views:
            raise ManifestError("manifest declares no views")
        view_names = [v.name for v in self.views]
        if len(set(view_names)) != len(view_names):
            raise ManifestError("manifest view names are not unique")
        for v in self.views:
            v.validate()
        declared = set(view_names)
        class_set = set(self.classes)
        seen_ids: set[str] = set()
        for s in self.samples:
            if not s.id:
                raise ManifestError("sample with empty id")
            if s.id in seen_ids:
                raise ManifestError(f"sample '{s.id}': duplicate id")
            seen_ids.add(s.id)
            if s.label not in class_set:
                raise ManifestError(f"sample '{s.id}': label {s.label!r} not in class list")
            if s.split not in SPLITS:
                raise ManifestError(f"sample '{s.id}': split must be one of {SPLITS}, got {s.split!r}")
            keys = set(s.view_paths)
            if keys != declared:
                missing = sorted(declared - keys)
                extra = sorted(keys - declared)
                parts = []
                if missing:
                    parts.append(f"missing views {missing}")
                if extra:
                    parts.append(f"undeclared views {extra}")
                raise ManifestError(f"sample '{s.id}': {'; '.join(parts)}")

    @property
    def view_names(self) -> list[str]:
        return [v.name for v in self.views]

    def view(self, name: str) -> ViewSpec:
        for v in self.views:
            if v.name == name:
                return v
        raise ManifestError(f"view {name!r} not declared in manifest")

    def class_index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise ManifestError(f"label {label!r} not in class list") from None

    def resolve_path(self, sample: SampleRecord, view_name: str) -> Path:
        p = Path(sample.view_paths[view_name])
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def subset(self, sample_ids: set[str]) -> "DatasetManifest":
        """New manifest keeping only the given samples, order preserved."""
        kept = [s for s in self.samples if s.id in sample_ids]
        return DatasetManifest(self.version, list(self.classes), list(self.views), kept, root=self.root)

    def split_subset(self, split: str) -> "DatasetManifest":
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        kept = [s for s in self.samples if s.split == split]
        return DatasetManifest(self.version, list(self.classes), list(self.views), kept, root=self.root)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "classes": list(self.classes),
            "views": [v.to_dict() for v in self.views],
            "samples": [s.to_dict() for s in self.samples],
        }

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a manifest file; sample order is kept as written."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"failed to parse manifest {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ManifestError(f"manifest {path} must be a JSON object")
    for key in ("version", "classes", "views", "samples"):
        if key not in raw:
            raise ManifestError(f"manifest {path} missing top-level key {key!r}")
    m = DatasetManifest(
        version=raw["version"],
        classes=list(raw["classes"]),
        views=[ViewSpec.from_dict(v) for v in raw["views"]],
        samples=[SampleRecord.from_dict(s) for s in raw["samples"]],
        root=path.parent,
    )
    m.validate()
    return m


def write_manifest(m: DatasetManifest, path: str | Path) -> None:
    m.validate()
    path = Path(path)
    path.write_text(json.dumps(m.to_dict(), indent=2) + "\n", encoding="utf-8")


def manifest_digest(m: DatasetManifest) -> str:
    """Collision-resistant digest of the manifest content (sha256 hex).

    Changes whenever the class list, view declarations, or sample list
    (ids, labels, splits, or paths) change.
    """
    canonical = json.dumps(m.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def class_counts(m: DatasetManifest) -> dict[str, int]:
    """Per-class sample counts in class-list order; absent classes count 0."""
    counts = {c: 0 for c in m.classes}
    for s in m.samples:
        counts[s.label] += 1
    return counts


def stratified_split(
    m: DatasetManifest, fraction: float, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split into (train, validation) manifests, stratified per class.

    Each class contributes round(fraction * n) samples to the validation
    side, clamped so both sides keep at least one sample; the result is
    within one sample of the requested fraction. Selection is a seeded
    shuffle, so the partition is deterministic for a fixed seed. Original
    sample order is preserved within each output, and the returned samples
    carry split fields "train" / "validation".
    """
    if not (0.0 < fraction < 1.0):
        raise ManifestError(f"split fraction must be in (0, 1), got {fraction}")
    counts = class_counts(m)
    for c, n in counts.items():
        if 0 < n < 2:
            raise ManifestError(f"class {c!r} has {n} sample(s); need at least 2 to split")

    rng = np.random.default_rng(seed)
    val_positions: set[int] = set()
    for c in m.classes:
        positions = [i for i, s in enumerate(m.samples) if s.label == c]
        n = len(positions)
        if n == 0:
            continue
        n_val = int(np.floor(fraction * n + 0.5))
        n_val = min(max(n_val, 1), n - 1)
        order = rng.permutation(n)
        val_positions.update(positions[j] for j in order[:n_val])

    train_samples = [
        replace(s, split="train") for i, s in enumerate(m.samples) if i not in val_positions
    ]
    val_samples = [
        replace(s, split="validation") for i, s in enumerate(m.samples) if i in val_positions
    ]
    mk = lambda samples: DatasetManifest(
        m.version, list(m.classes), list(m.views), samples, root=m.root
    )
    return mk(train_samples), mk(val_samples)
