"""Command-line entry point orchestrating all pipelines.

Exit codes: 0 success, 2 usage/validation error, 3 refusal to overwrite
without --force, 4 runtime failure. Errors are single machine-parsable lines
on stderr of the form ``dfl: error: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backbones import load_backbone
from .bench import (
    AblationSpec,
    BenchmarkSpec,
    BiomarkerConfig,
    _threshold_predictions,
    ablation_table,
    run_ablation,
    run_backbone_selection,
    run_biomarker_task,
    selection_table,
)
from .errors import ConfigError, DflError
from .extractor import extract, extract_dataset, normalize_embedding, preprocess_view
from .head import HeadConfig, forward, load_checkpoint, predict, save_checkpoint, train
from .manifest import ViewSpec, load_manifest
from .metrics import evaluate_predictions, format_task_table
from .store import read_store

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CLOBBER = 3
EXIT_RUNTIME = 4


class UsageError(DflError):
    """Bad flags, bad config, or missing/mismatched inputs."""


class ClobberError(DflError):
    """Output exists and --force was not given."""


def _check_clobber(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ClobberError(f"output {path} exists; pass --force to overwrite")


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")


def _load_head_config(path: Path, input_dim: int, num_classes: int, seed: int | None) -> HeadConfig:
    _require_file(path, "head config file")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"failed to parse head config {path}: {e}") from e
    raw.setdefault("input_dim", input_dim)
    raw.setdefault("num_classes", num_classes)
    if seed is not None:
        raw["seed"] = seed
    try:
        return HeadConfig.from_dict(raw)
    except ConfigError as e:
        raise UsageError(str(e)) from e


def cmd_extract(args) -> int:
    manifest_path = Path(args.manifest)
    sidecar = Path(args.backbone)
    out = Path(args.out)
    _require_file(manifest_path, "manifest")
    _require_file(sidecar, "backbone sidecar")
    _check_clobber(out, args.force)
    try:
        manifest = load_manifest(manifest_path)
        views = [v for v in args.views.split(",") if v]
        for v in views:
            if v not in manifest.view_names:
                raise UsageError(f"view '{v}' not declared in manifest")
        handle = load_backbone(sidecar)
    except DflError as e:
        raise UsageError(str(e)) from e
    summary = extract_dataset(
        manifest,
        handle,
        views,
        out,
        batch_size=args.batch_size,
        workers=args.workers,
        normalization=args.normalize,
    )
    print(f"rows={summary.rows} dim={summary.dim}")
    return EXIT_OK


def cmd_train(args) -> int:
    train_path, val_path = Path(args.train), Path(args.val)
    out = Path(args.out)
    _require_file(train_path, "train store")
    _require_file(val_path, "validation store")
    _check_clobber(out, args.force)
    try:
        train_ds = read_store(train_path)
        val_ds = read_store(val_path)
    except DflError as e:
        raise UsageError(str(e)) from e
    if train_ds.dim != val_ds.dim:
        raise UsageError(f"train dim {train_ds.dim} != validation dim {val_ds.dim}")
    if train_ds.rows == 0 or val_ds.rows == 0:
        raise UsageError("no samples: train and validation stores must be non-empty")
    cfg = _load_head_config(
        Path(args.config), train_ds.dim, train_ds.num_classes, args.seed
    )
    if cfg.input_dim != train_ds.dim:
        raise UsageError(f"config input_dim {cfg.input_dim} != store dim {train_ds.dim}")

    model, log = train(train_ds, val_ds, cfg)
    save_checkpoint(
        model,
        out,
        class_names=train_ds.provenance.get("classes"),
        views=train_ds.provenance.get("views"),
    )
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log.csv")
    log_path.write_text(log.to_csv(), encoding="utf-8")
    print(
        f"best_epoch={log.best_epoch} {log.val_metric_name}={log.best_val_metric!r} "
        f"epochs={len(log.rows)} checkpoint={out} log={log_path}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    model_path, test_path = Path(args.model), Path(args.test)
    report_path = Path(args.report)
    _require_file(model_path, "model checkpoint")
    _require_file(test_path, "test store")
    _check_clobber(report_path, args.force)
    try:
        model, meta = load_checkpoint(model_path)
        test_ds = read_store(test_path)
    except DflError as e:
        raise UsageError(str(e)) from e
    if test_ds.rows == 0:
        raise UsageError("no samples in test store")
    if test_ds.dim != model.config.input_dim:
        raise UsageError(
            f"test store dim {test_ds.dim} != model input_dim {model.config.input_dim}"
        )
    _, proba = predict(model, test_ds)
    pred = _threshold_predictions(
        proba, model.config.num_classes, args.positive_class, args.threshold
    )
    report = evaluate_predictions(
        test_ds.labels, pred, model.config.num_classes, proba, args.positive_class
    )
    report.metadata = {
        "model": str(model_path),
        "test_store": str(test_path),
        "threshold": args.threshold,
        "class_names": meta.get("class_names"),
    }
    report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    pos = report.per_class[args.positive_class] if model.config.num_classes == 2 else None
    print(
        format_task_table(
            [
                {
                    "task": test_path.stem,
                    "method": "head",
                    "precision": pos["precision"] if pos else None,
                    "recall": pos["recall"] if pos else None,
                    "pr_auc": report.pr_auc,
                    "training_time": "-",
                }
            ]
        )
    )
    print(f"report={report_path}")
    return EXIT_OK


def cmd_select_backbone(args) -> int:
    spec_path = Path(args.spec)
    report_path = Path(args.report)
    _require_file(spec_path, "benchmark spec")
    _check_clobber(report_path, args.force)
    try:
        spec = BenchmarkSpec.from_file(spec_path)
    except DflError as e:
        raise UsageError(str(e)) from e
    results = run_backbone_selection(spec)
    table = selection_table(results)
    payload = {"ranking": [r.to_dict() for r in results], "table": table}
    report_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(table)
    print(f"report={report_path}")
    if not any(r.status == "ok" for r in results):
        raise DflError("every candidate backbone failed")
    return EXIT_OK


def cmd_run_task(args) -> int:
    cfg_path = Path(args.config)
    report_path = Path(args.report)
    _require_file(cfg_path, "task config")
    _check_clobber(report_path, args.force)
    try:
        cfg = BiomarkerConfig.from_file(cfg_path)
    except DflError as e:
        raise UsageError(str(e)) from e
    report = run_biomarker_task(cfg)
    report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    pos = report.per_class[cfg.positive_class] if len(report.per_class) == 2 else None
    print(
        format_task_table(
            [
                {
                    "task": cfg.task,
                    "method": "DFL - " + "+".join(cfg.views),
                    "precision": pos["precision"] if pos else None,
                    "recall": pos["recall"] if pos else None,
                    "pr_auc": report.pr_auc,
                    "training_time": f"{report.metadata['train_seconds']:.1f} s",
                }
            ]
        )
    )
    print(f"report={report_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec_path = Path(args.spec)
    report_path = Path(args.report)
    _require_file(spec_path, "ablation spec")
    _check_clobber(report_path, args.force)
    try:
        spec = AblationSpec.from_file(spec_path)
    except DflError as e:
        raise UsageError(str(e)) from e
    cells = run_ablation(spec)
    table = ablation_table(cells)
    payload = {"cells": [c.to_dict() for c in cells], "table": table}
    report_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(table)
    print(f"report={report_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model_path = Path(args.model)
    sidecar = Path(args.backbone)
    _require_file(model_path, "model checkpoint")
    _require_file(sidecar, "backbone sidecar")
    try:
        model, meta = load_checkpoint(model_path)
        handle = load_backbone(sidecar)
    except DflError as e:
        raise UsageError(str(e)) from e

    view_dicts = meta.get("views") or []
    if not view_dicts:
        raise UsageError("checkpoint records no view composition; cannot preprocess inputs")
    views = [ViewSpec.from_dict(v) for v in view_dicts]
    if args.views:
        requested = [v for v in args.views.split(",") if v]
        by_name = {v.name: v for v in views}
        missing = [n for n in requested if n not in by_name]
        if missing:
            raise UsageError(f"views not recorded in checkpoint: {missing}")
        views = [by_name[n] for n in requested]
    if handle.embedding_dim * len(views) != model.config.input_dim:
        raise UsageError(
            f"backbone dim {handle.embedding_dim} x {len(views)} view(s) != "
            f"model input_dim {model.config.input_dim}"
        )
    class_names = meta.get("class_names") or [str(i) for i in range(model.config.num_classes)]

    # Single view: each --image is one sample. Multiple views: one sample,
    # images given as view_name=path pairs covering every view exactly.
    samples: list[dict[str, Path]] = []
    if len(views) == 1:
        samples = [{views[0].name: Path(p)} for p in args.image]
    else:
        mapping: dict[str, Path] = {}
        for item in args.image:
            if "=" not in item:
                raise UsageError(
                    "multi-view prediction needs --image view_name=path for every view"
                )
            name, _, p = item.partition("=")
            mapping[name] = Path(p)
        needed = {v.name for v in views}
        if set(mapping) != needed:
            raise UsageError(f"multi-view prediction needs exactly the views {sorted(needed)}")
        samples = [mapping]

    for sample in samples:
        for p in sample.values():
            _require_file(p, "image")

    for sample in samples:
        parts = []
        for view in views:
            img = preprocess_view(sample[view.name], view, handle.normalization)
            vec = extract(handle, [img])[0]
            parts.append(normalize_embedding(vec))
        x = np.concatenate(parts)
        proba = forward(model, x)
        cls = int(np.argmax(proba))
        print(class_names[cls] + " " + " ".join(f"{p:.6f}" for p in proba))
    return EXIT_OK


def cmd_store_inspect(args) -> int:
    path = Path(args.store)
    _require_file(path, "store")
    try:
        ds = read_store(path)
    except DflError as e:
        raise UsageError(str(e)) from e
    print(f"path: {path}")
    print(f"rows: {ds.rows}")
    print(f"dim: {ds.dim}")
    print(f"dtype: float32-le")
    print("provenance:")
    print(json.dumps(ds.provenance, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfl",
        description="Deep-feature-learning pipelines: extraction, head training, benchmarks.",
    )
    parser.add_argument("--version", action="version", version=f"dfl {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="override config seeds")
    parser.add_argument("--threads", type=int, default=1, help="default worker count")
    parser.add_argument("--log-level", default="warning", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract embeddings from a manifest into a store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", required=True, help="backbone sidecar JSON")
    p.add_argument("--views", required=True, help="comma-separated view names, in order")
    p.add_argument("--out", required=True, help="output store path")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--normalize", choices=["l2", "none"], default="l2")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a classification head on embedding stores")
    p.add_argument("--train", required=True, help="train store")
    p.add_argument("--val", required=True, help="validation store")
    p.add_argument("--config", required=True, help="head config JSON")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", default=None, help="training-log CSV path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test store")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--report", required=True, help="output report JSON")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--positive-class", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select-backbone", help="rank candidate backbones on a proxy task")
    p.add_argument("--spec", required=True, help="benchmark spec JSON")
    p.add_argument("--report", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_select_backbone)

    p = sub.add_parser("run-task", help="end-to-end biomarker task: extract, train, evaluate")
    p.add_argument("--config", required=True, help="task config JSON")
    p.add_argument("--report", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_run_task)

    p = sub.add_parser("ablate", help="noise/view ablation grid")
    p.add_argument("--spec", required=True, help="ablation spec JSON")
    p.add_argument("--report", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="classify images with a backbone and checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--image", action="append", required=True, help="image path (repeatable); "
                   "use view_name=path with multi-view models")
    p.add_argument("--views", default=None, help="comma-separated view names (default: "
                   "checkpoint's recorded composition)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("store", help="embedding store utilities")
    store_sub = p.add_subparsers(dest="store_command", required=True)
    pi = store_sub.add_parser("inspect", help="print store header and provenance")
    pi.add_argument("store")
    pi.set_defaults(func=cmd_store_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper())
    if getattr(args, "workers", None) is None and hasattr(args, "workers"):
        args.workers = max(1, args.threads)
    try:
        return args.func(args)
    except ClobberError as e:
        print(f"dfl: error: {e}", file=sys.stderr)
        return EXIT_CLOBBER
    except (UsageError, ConfigError) as e:
        print(f"dfl: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DflError as e:
        print(f"dfl: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"dfl: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
