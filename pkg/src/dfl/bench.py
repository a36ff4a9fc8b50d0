"""Experiment harnesses: backbone selection, biomarker task runs, ablations.

Extraction results are cached per (backbone, view, manifest digest,
normalization mode); a re-run with identical inputs performs zero inference
calls, which the handles' counters make checkable. Failed backbones are
reported and excluded without aborting the whole benchmark. Every report
carries the hash of the configuration that produced it.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbones import BackboneHandle, load_backbone
from .errors import ConfigError, DflError
from .extractor import extract_dataset
from .head import HeadConfig, predict, train
from .manifest import DatasetManifest, load_manifest, manifest_digest, stratified_split
from .metrics import (
    EvalReport,
    balanced_accuracy,
    confusion,
    evaluate_predictions,
    format_ablation_table,
    format_selection_table,
)
from .store import EmbeddingDataset, concat_stores, read_store


def config_hash(obj) -> str:
    """Stable short digest of a JSON-serializable configuration."""
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


@dataclass
class BenchmarkSpec:
    """Backbone-selection run: candidates x seeds on one split manifest."""

    manifest: Path
    backbones: list[Path]
    views: list[str]
    head: dict = field(default_factory=dict)
    repeats: int = 3
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    cache_dir: Path | None = None
    normalization: str = "l2"

    def validate(self) -> None:
        if not self.backbones:
            raise ConfigError("benchmark spec has an empty candidate list")
        if not self.views:
            raise ConfigError("benchmark spec declares no views")
        if not self.seeds:
            raise ConfigError("benchmark spec has an empty seed list")
        if self.repeats != len(self.seeds):
            raise ConfigError(
                f"repeats ({self.repeats}) must equal the number of seeds ({len(self.seeds)})"
            )

    @classmethod
    def from_file(cls, path: str | Path) -> "BenchmarkSpec":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"failed to parse benchmark spec {path}: {e}") from e
        base = path.parent
        try:
            spec = cls(
                manifest=_resolve(base, raw["manifest"]),
                backbones=[_resolve(base, p) for p in raw["backbones"]],
                views=list(raw["views"]),
                head=dict(raw.get("head", {})),
                repeats=raw.get("repeats", len(raw.get("seeds", [0, 1, 2]))),
                seeds=list(raw.get("seeds", [0, 1, 2])),
                cache_dir=_resolve(base, raw["cache_dir"]) if raw.get("cache_dir") else None,
                normalization=raw.get("normalization", "l2"),
            )
        except KeyError as e:
            raise ConfigError(f"benchmark spec {path} missing key {e.args[0]!r}") from e
        spec.validate()
        return spec


@dataclass
class BackboneResult:
    """Outcome for one candidate: mean metrics over seeds, or a failure record."""

    backbone_id: str
    status: str  # "ok" | "failed"
    error: str | None = None
    balanced_accuracy: float | None = None
    cohen_kappa: float | None = None
    weighted_f1: float | None = None
    runs: list[EvalReport] = field(default_factory=list)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "backbone_id": self.backbone_id,
            "status": self.status,
            "error": self.error,
            "balanced_accuracy": self.balanced_accuracy,
            "cohen_kappa": self.cohen_kappa,
            "weighted_f1": self.weighted_f1,
            "runs": [r.to_dict() for r in self.runs],
            "config_hash": self.config_hash,
        }


def _cache_path(cache_dir: Path, backbone_id: str, view: str, digest: str, norm: str) -> Path:
    return cache_dir / f"{backbone_id}__{view}__{norm}__{digest[:16]}.dflb"


def get_or_extract(
    manifest: DatasetManifest,
    handle: BackboneHandle,
    view: str,
    cache_dir: Path,
    normalization: str = "l2",
    batch_size: int = 32,
    workers: int = 1,
) -> EmbeddingDataset:
    """Single-view store from cache, extracting (and caching) on a miss.

    Cached files are trusted only if their provenance matches the requested
    key; anything stale is rebuilt in place.
    """
    digest = manifest_digest(manifest)
    path = _cache_path(cache_dir, handle.id, view, digest, normalization)
    if path.is_file():
        ds = read_store(path)
        prov = ds.provenance
        if (
            prov.get("backbone_id") == handle.id
            and prov.get("manifest_hash") == digest
            and prov.get("normalization") == normalization
            and [v["name"] for v in prov.get("views", [])] == [view]
        ):
            return ds
    extract_dataset(
        manifest,
        handle,
        [view],
        path,
        batch_size=batch_size,
        workers=workers,
        normalization=normalization,
    )
    return read_store(path)


def _multiview_split(
    manifest: DatasetManifest,
    handle: BackboneHandle,
    views: list[str],
    cache_dir: Path,
    normalization: str,
    batch_size: int = 32,
    workers: int = 1,
) -> EmbeddingDataset:
    parts = [
        get_or_extract(manifest, handle, v, cache_dir, normalization, batch_size, workers)
        for v in views
    ]
    return concat_stores(parts)


def _timed_train(train_ds, val_ds, cfg) -> tuple:
    start = time.perf_counter()
    model, log = train(train_ds, val_ds, cfg)
    return model, log, time.perf_counter() - start


def _check_head_template(head: dict, actual_dim: int) -> None:
    """A template that pins input_dim must agree with the extracted stores."""
    if "input_dim" in head and head["input_dim"] != actual_dim:
        raise ConfigError(
            f"head template input_dim {head['input_dim']} != extracted dim {actual_dim}"
        )


def run_backbone_selection(spec: BenchmarkSpec, cache_dir: Path | None = None) -> list[BackboneResult]:
    """Rank candidates by mean validation balanced accuracy (ties by kappa).

    The head protocol is a single dense layer unless the spec's head template
    overrides it. A backbone that fails to load or extract is marked failed
    and excluded from the ranking, and the run continues.
    """
    spec.validate()
    cache = Path(cache_dir) if cache_dir else (spec.cache_dir or spec.manifest.parent / ".dfl_cache")
    cache.mkdir(parents=True, exist_ok=True)

    manifest = load_manifest(spec.manifest)
    train_m = manifest.split_subset("train")
    val_m = manifest.split_subset("validation")
    if not train_m.samples or not val_m.samples:
        raise ConfigError("benchmark manifest needs both train and validation split samples")

    results: list[BackboneResult] = []
    for sidecar in spec.backbones:
        run_cfg_hash = config_hash(
            {
                "sidecar": str(sidecar),
                "manifest": manifest_digest(manifest),
                "views": spec.views,
                "head": spec.head,
                "seeds": spec.seeds,
                "normalization": spec.normalization,
            }
        )
        try:
            handle = load_backbone(sidecar)
            train_ds = _multiview_split(train_m, handle, spec.views, cache, spec.normalization)
            val_ds = _multiview_split(val_m, handle, spec.views, cache, spec.normalization)
            _check_head_template(spec.head, train_ds.dim)
            reports: list[EvalReport] = []
            for seed in spec.seeds:
                head_kwargs = dict(spec.head)
                head_kwargs.update(
                    input_dim=train_ds.dim,
                    num_classes=train_ds.num_classes,
                    seed=seed,
                )
                cfg = HeadConfig.from_dict(head_kwargs)
                model, log, seconds = _timed_train(train_ds, val_ds, cfg)
                pred, proba = predict(model, val_ds)
                report = evaluate_predictions(val_ds.labels, pred, train_ds.num_classes, proba)
                report.metadata = {
                    "backbone_id": handle.id,
                    "views": list(spec.views),
                    "seed": seed,
                    "config_hash": run_cfg_hash,
                    "train_seconds": seconds,
                    "best_epoch": log.best_epoch,
                }
                reports.append(report)
            results.append(
                BackboneResult(
                    backbone_id=handle.id,
                    status="ok",
                    balanced_accuracy=float(np.mean([r.balanced_accuracy for r in reports])),
                    cohen_kappa=float(np.mean([r.cohen_kappa for r in reports])),
                    weighted_f1=float(np.mean([r.weighted_f1 for r in reports])),
                    runs=reports,
                    config_hash=run_cfg_hash,
                )
            )
        except DflError as e:
            results.append(
                BackboneResult(
                    backbone_id=str(sidecar.stem),
                    status="failed",
                    error=str(e),
                    config_hash=run_cfg_hash,
                )
            )

    ok = [r for r in results if r.status == "ok"]
    failed = [r for r in results if r.status != "ok"]
    ok.sort(key=lambda r: (-r.balanced_accuracy, -r.cohen_kappa))
    return ok + failed


def selection_table(results: list[BackboneResult]) -> str:
    rows = []
    for r in results:
        rows.append(
            {
                "backbone_id": r.backbone_id,
                "status": r.status,
                "balanced_accuracy": r.balanced_accuracy,
                "cohen_kappa": r.cohen_kappa,
                "weighted_f1": r.weighted_f1,
            }
        )
    return format_selection_table(rows)


@dataclass
class BiomarkerConfig:
    """End-to-end extract/train/evaluate run for one classification task."""

    task: str
    train_manifest: Path
    test_manifest: Path
    backbone: Path
    views: list[str]
    head: dict = field(default_factory=dict)
    val_fraction: float = 0.25
    split_seed: int = 0
    seed: int = 0
    positive_class: int = 1
    threshold: float = 0.5
    cache_dir: Path | None = None
    normalization: str = "l2"

    def validate(self) -> None:
        if not self.views:
            raise ConfigError("biomarker config declares no views")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")

    @classmethod
    def from_file(cls, path: str | Path) -> "BiomarkerConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"failed to parse task config {path}: {e}") from e
        base = path.parent
        try:
            cfg = cls(
                task=raw.get("task", path.stem),
                train_manifest=_resolve(base, raw["train_manifest"]),
                test_manifest=_resolve(base, raw["test_manifest"]),
                backbone=_resolve(base, raw["backbone"]),
                views=list(raw["views"]),
                head=dict(raw.get("head", {})),
                val_fraction=raw.get("val_fraction", 0.25),
                split_seed=raw.get("split_seed", 0),
                seed=raw.get("seed", 0),
                positive_class=raw.get("positive_class", 1),
                threshold=raw.get("threshold", 0.5),
                cache_dir=_resolve(base, raw["cache_dir"]) if raw.get("cache_dir") else None,
                normalization=raw.get("normalization", "l2"),
            )
        except KeyError as e:
            raise ConfigError(f"task config {path} missing key {e.args[0]!r}") from e
        cfg.validate()
        return cfg


# Default hidden width for biomarker heads; selection runs use a bare linear head.
BIOMARKER_HIDDEN_DIM = 256


def _train_val_manifests(m: DatasetManifest, val_fraction: float, split_seed: int):
    val = m.split_subset("validation")
    if val.samples:
        return m.split_subset("train"), val
    return stratified_split(m, val_fraction, split_seed)


def _threshold_predictions(
    proba: np.ndarray, num_classes: int, positive_class: int, threshold: float
) -> np.ndarray:
    if num_classes != 2:
        return proba.argmax(axis=1)
    pos = proba[:, positive_class] >= threshold
    return np.where(pos, positive_class, 1 - positive_class).astype(np.int64)


def run_biomarker_task(cfg: BiomarkerConfig, cache_dir: Path | None = None) -> EvalReport:
    """Extract, train (wall-clock timed), and evaluate on the test manifest.

    Binary tasks report precision/recall of the positive class at the
    configured threshold, plus PR-AUC from the positive-class probabilities.
    """
    cfg.validate()
    cache = Path(cache_dir) if cache_dir else (cfg.cache_dir or cfg.train_manifest.parent / ".dfl_cache")
    cache.mkdir(parents=True, exist_ok=True)

    run_hash = config_hash(
        {
            "task": cfg.task,
            "backbone": str(cfg.backbone),
            "views": cfg.views,
            "head": cfg.head,
            "seed": cfg.seed,
            "val_fraction": cfg.val_fraction,
            "split_seed": cfg.split_seed,
            "threshold": cfg.threshold,
            "normalization": cfg.normalization,
        }
    )

    handle = load_backbone(cfg.backbone)
    train_m, val_m = _train_val_manifests(
        load_manifest(cfg.train_manifest), cfg.val_fraction, cfg.split_seed
    )
    test_m = load_manifest(cfg.test_manifest)

    train_ds = _multiview_split(train_m, handle, cfg.views, cache, cfg.normalization)
    val_ds = _multiview_split(val_m, handle, cfg.views, cache, cfg.normalization)
    test_ds = _multiview_split(test_m, handle, cfg.views, cache, cfg.normalization)
    _check_head_template(cfg.head, train_ds.dim)
    if test_ds.dim != train_ds.dim:
        raise ConfigError(f"test store dim {test_ds.dim} != train store dim {train_ds.dim}")

    head_kwargs = {"hidden_dim": BIOMARKER_HIDDEN_DIM}
    head_kwargs.update(cfg.head)
    head_kwargs.update(
        input_dim=train_ds.dim,
        num_classes=train_ds.num_classes,
        seed=cfg.head.get("seed", cfg.seed),
    )
    head_cfg = HeadConfig.from_dict(head_kwargs)

    model, log, seconds = _timed_train(train_ds, val_ds, head_cfg)
    _, proba = predict(model, test_ds)
    pred = _threshold_predictions(proba, head_cfg.num_classes, cfg.positive_class, cfg.threshold)
    report = evaluate_predictions(
        test_ds.labels, pred, head_cfg.num_classes, proba, cfg.positive_class
    )
    report.metadata = {
        "task": cfg.task,
        "backbone_id": handle.id,
        "views": list(cfg.views),
        "config_hash": run_hash,
        "train_seconds": seconds,
        "best_epoch": log.best_epoch,
        "best_val_metric": log.best_val_metric,
        "val_metric_name": log.val_metric_name,
    }
    return report


@dataclass
class AblationSpec:
    """Cartesian grid over feature-noise levels and view compositions."""

    task: str
    train_manifest: Path
    eval_manifest: Path
    backbone: Path
    view_sets: list[list[str]]
    noise_sigmas: list[float]
    head: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    positive_class: int = 1
    threshold: float = 0.5
    cache_dir: Path | None = None
    normalization: str = "l2"

    def validate(self) -> None:
        if not self.view_sets or any(not vs for vs in self.view_sets):
            raise ConfigError("ablation spec needs at least one non-empty view set")
        if not self.noise_sigmas:
            raise ConfigError("ablation spec needs at least one noise sigma")
        if any(s < 0 for s in self.noise_sigmas):
            raise ConfigError("noise sigmas must be >= 0")
        if not self.seeds:
            raise ConfigError("ablation spec has an empty seed list")

    @classmethod
    def from_file(cls, path: str | Path) -> "AblationSpec":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"failed to parse ablation spec {path}: {e}") from e
        base = path.parent
        try:
            spec = cls(
                task=raw.get("task", path.stem),
                train_manifest=_resolve(base, raw["train_manifest"]),
                eval_manifest=_resolve(base, raw["eval_manifest"]),
                backbone=_resolve(base, raw["backbone"]),
                view_sets=[list(vs) for vs in raw["view_sets"]],
                noise_sigmas=[float(s) for s in raw["noise_sigmas"]],
                head=dict(raw.get("head", {})),
                seeds=list(raw.get("seeds", [0, 1, 2])),
                positive_class=raw.get("positive_class", 1),
                threshold=raw.get("threshold", 0.5),
                cache_dir=_resolve(base, raw["cache_dir"]) if raw.get("cache_dir") else None,
                normalization=raw.get("normalization", "l2"),
            )
        except KeyError as e:
            raise ConfigError(f"ablation spec {path} missing key {e.args[0]!r}") from e
        spec.validate()
        return spec


@dataclass
class AblationCell:
    """Seed-averaged outcome of one (view set, noise sigma) grid cell.

    ``gap`` is the mean train-minus-validation metric of the restored best
    model, the overfitting witness the noise is meant to shrink.
    """

    views: tuple[str, ...]
    noise_sigma: float
    val_metric: float
    train_metric: float
    gap: float
    precision: float | None
    recall: float | None
    pr_auc: float | None
    reports: list[EvalReport] = field(default_factory=list)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "views": list(self.views),
            "noise_sigma": self.noise_sigma,
            "val_metric": self.val_metric,
            "train_metric": self.train_metric,
            "gap": self.gap,
            "precision": self.precision,
            "recall": self.recall,
            "pr_auc": self.pr_auc,
            "reports": [r.to_dict() for r in self.reports],
            "config_hash": self.config_hash,
        }


def run_ablation(spec: AblationSpec, cache_dir: Path | None = None) -> list[AblationCell]:
    """Train every grid cell with its own seed replicates.

    Each cell trains against the held-out eval manifest (which also drives
    early stopping) and reports the seed-mean validation metric, the clean
    train metric of the restored model, and their gap. Binary tasks add
    precision/recall at the threshold and PR-AUC.
    """
    spec.validate()
    cache = Path(cache_dir) if cache_dir else (spec.cache_dir or spec.train_manifest.parent / ".dfl_cache")
    cache.mkdir(parents=True, exist_ok=True)

    handle = load_backbone(spec.backbone)
    train_m = load_manifest(spec.train_manifest)
    eval_m = load_manifest(spec.eval_manifest)

    cells: list[AblationCell] = []
    for views in spec.view_sets:
        train_ds = _multiview_split(train_m, handle, views, cache, spec.normalization)
        eval_ds = _multiview_split(eval_m, handle, views, cache, spec.normalization)
        _check_head_template(spec.head, train_ds.dim)
        for sigma in spec.noise_sigmas:
            cell_hash = config_hash(
                {
                    "task": spec.task,
                    "backbone": str(spec.backbone),
                    "views": views,
                    "sigma": sigma,
                    "head": spec.head,
                    "seeds": spec.seeds,
                    "normalization": spec.normalization,
                }
            )
            val_scores, train_scores, gaps = [], [], []
            precisions, recalls, aucs = [], [], []
            reports = []
            for seed in spec.seeds:
                head_kwargs = dict(spec.head)
                head_kwargs.update(
                    input_dim=train_ds.dim,
                    num_classes=train_ds.num_classes,
                    noise_sigma=sigma,
                    seed=seed,
                )
                cfg = HeadConfig.from_dict(head_kwargs)
                model, log, seconds = _timed_train(train_ds, eval_ds, cfg)

                train_pred, _ = predict(model, train_ds)
                train_bal = balanced_accuracy(
                    confusion(train_ds.labels, train_pred, cfg.num_classes)
                )
                eval_pred_raw, proba = predict(model, eval_ds)
                eval_bal = balanced_accuracy(
                    confusion(eval_ds.labels, eval_pred_raw, cfg.num_classes)
                )
                pred = _threshold_predictions(
                    proba, cfg.num_classes, spec.positive_class, spec.threshold
                )
                report = evaluate_predictions(
                    eval_ds.labels, pred, cfg.num_classes, proba, spec.positive_class
                )
                report.metadata = {
                    "task": spec.task,
                    "views": list(views),
                    "noise_sigma": sigma,
                    "seed": seed,
                    "config_hash": cell_hash,
                    "train_seconds": seconds,
                    "best_epoch": log.best_epoch,
                }
                reports.append(report)
                val_scores.append(eval_bal)
                train_scores.append(train_bal)
                gaps.append(train_bal - eval_bal)
                if cfg.num_classes == 2:
                    precisions.append(report.per_class[spec.positive_class]["precision"])
                    recalls.append(report.per_class[spec.positive_class]["recall"])
                    aucs.append(report.pr_auc)

            cells.append(
                AblationCell(
                    views=tuple(views),
                    noise_sigma=sigma,
                    val_metric=float(np.mean(val_scores)),
                    train_metric=float(np.mean(train_scores)),
                    gap=float(np.mean(gaps)),
                    precision=float(np.mean(precisions)) if precisions else None,
                    recall=float(np.mean(recalls)) if recalls else None,
                    pr_auc=float(np.mean(aucs)) if aucs else None,
                    reports=reports,
                    config_hash=cell_hash,
                )
            )
    return cells


def ablation_table(cells: list[AblationCell]) -> str:
    rows = []
    for c in cells:
        rows.append(
            {
                "method": "+".join(c.views),
                "noise_sigma": c.noise_sigma,
                "val_metric": c.val_metric,
                "precision": c.precision,
                "recall": c.recall,
                "pr_auc": c.pr_auc,
            }
        )
    return format_ablation_table(rows)
