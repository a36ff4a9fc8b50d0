"""Frozen-backbone handles: sidecar parsing, model runners, probe validation.

Two model formats sit behind one inference contract (a [batch, H, W, 3]
float32 array in, a [batch, embedding_dim] float32 matrix out):

* ``torchscript`` — a frozen network exported as a TorchScript graph. torch
  is imported lazily and is only required for this format.
* ``stub-linear`` — a pure-numpy backbone for tests and synthetic benchmarks:
  per-cell channel means over an RxR grid of the image, then an affine map
  W f + b loaded from an .npz file. No model runtime needed.

Sidecar file (JSON): {id, model, format, embedding_dim, input_size, mean,
std, pooling, source}. ``model`` is a path relative to the sidecar. Loading
runs a probe inference on a zero image and checks the output width against
the declared embedding_dim. Inference counters track extraction calls only
(the probe is excluded), which lets benchmark code verify cache hits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import BackboneError
from .imageprep import PixelNormalization

POOLINGS = ("none", "global_average")
FORMATS = ("stub-linear", "torchscript")


@dataclass
class BackboneHandle:
    """A loaded, probe-validated frozen backbone."""

    id: str
    model_path: Path
    embedding_dim: int
    input_size: int
    normalization: PixelNormalization
    pooling: str
    format: str
    source: str = ""
    _runner: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    inference_batches: int = 0
    inference_images: int = 0

    def run(self, batch: np.ndarray) -> np.ndarray:
        """Run one inference batch; output is [n, embedding_dim] float32."""
        if batch.ndim != 4 or batch.shape[1:] != (self.input_size, self.input_size, 3):
            raise BackboneError(
                f"backbone '{self.id}' expects batches of shape "
                f"(n, {self.input_size}, {self.input_size}, 3), got {batch.shape}"
            )
        out = self._runner(np.ascontiguousarray(batch, dtype=np.float32))
        out = _apply_pooling(out, self.pooling)
        if out.ndim != 2 or out.shape[0] != batch.shape[0]:
            raise BackboneError(
                f"backbone '{self.id}' produced shape {out.shape} for a batch of {batch.shape[0]}"
            )
        if out.shape[1] != self.embedding_dim:
            raise BackboneError(
                f"backbone '{self.id}': output width {out.shape[1]} != "
                f"declared embedding_dim {self.embedding_dim}"
            )
        self.inference_batches += 1
        self.inference_images += batch.shape[0]
        return np.ascontiguousarray(out, dtype=np.float32)


def _apply_pooling(out: np.ndarray, pooling: str) -> np.ndarray:
    """Global-average-pool a [batch, C, H, W] feature map when requested."""
    if out.ndim == 2:
        return out
    if out.ndim == 4:
        if pooling != "global_average":
            raise BackboneError(
                "model produced a 4-D feature map but the sidecar declares pooling 'none'"
            )
        return out.mean(axis=(2, 3))
    raise BackboneError(f"unsupported model output rank {out.ndim}")


def grid_features(batch: np.ndarray, grid: int) -> np.ndarray:
    """Per-cell channel means over a grid x grid partition, flattened row-major.

    Feature order is (cell_row, cell_col, channel); length 3 * grid**2.
    """
    n, h, w, c = batch.shape
    if h % grid or w % grid:
        raise BackboneError(f"input size {h}x{w} not divisible by grid {grid}")
    cell = h // grid
    cells = batch.reshape(n, grid, cell, grid, w // grid, c).mean(axis=(2, 4))
    return cells.reshape(n, grid * grid * c)


def _make_stub_runner(model_path: Path, input_size: int) -> Callable[[np.ndarray], np.ndarray]:
    try:
        with np.load(model_path) as z:
            w = z["W"].astype(np.float64)
            b = z["b"].astype(np.float64)
            grid = int(z["grid"])
    except (OSError, KeyError, ValueError) as e:
        raise BackboneError(f"failed to load stub backbone {model_path}: {e}") from e
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise BackboneError(f"stub backbone {model_path}: inconsistent W/b shapes")
    if input_size % grid:
        raise BackboneError(f"stub grid {grid} does not divide input_size {input_size}")
    if w.shape[1] != 3 * grid * grid:
        raise BackboneError(
            f"stub backbone {model_path}: W has {w.shape[1]} columns, "
            f"expected {3 * grid * grid} for grid {grid}"
        )

    def runner(batch: np.ndarray) -> np.ndarray:
        f = grid_features(batch.astype(np.float64), grid)
        return (f @ w.T + b).astype(np.float32)

    return runner


def _make_torchscript_runner(model_path: Path) -> Callable[[np.ndarray], np.ndarray]:
    try:
        import torch
    except ImportError as e:
        raise BackboneError(
            "torchscript backbones need the optional 'torch' dependency "
            "(pip install dfl[runtime])"
        ) from e
    try:
        module = torch.jit.load(str(model_path), map_location="cpu")
    except Exception as e:
        raise BackboneError(f"failed to load torchscript model {model_path}: {e}") from e
    module.eval()

    def runner(batch: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            t = torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))
            out = module(t)
        return out.numpy()

    return runner


def load_backbone(sidecar_path: str | Path) -> BackboneHandle:
    """Load a backbone from its sidecar and validate it with a probe inference."""
    sidecar_path = Path(sidecar_path)
    if not sidecar_path.is_file():
        raise BackboneError(f"sidecar file not found: {sidecar_path}")
    try:
        meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise BackboneError(f"failed to parse sidecar {sidecar_path}: {e}") from e
    for key in ("id", "model", "format", "embedding_dim", "input_size", "mean", "std"):
        if key not in meta:
            raise BackboneError(f"sidecar {sidecar_path} missing key {key!r}")
    fmt = meta["format"]
    if fmt not in FORMATS:
        raise BackboneError(f"sidecar {sidecar_path}: unknown format {fmt!r}")
    pooling = meta.get("pooling", "none")
    if pooling not in POOLINGS:
        raise BackboneError(f"sidecar {sidecar_path}: unknown pooling {pooling!r}")
    embedding_dim = int(meta["embedding_dim"])
    input_size = int(meta["input_size"])
    if embedding_dim < 1 or input_size < 1:
        raise BackboneError(f"sidecar {sidecar_path}: embedding_dim and input_size must be >= 1")

    model_path = Path(meta["model"])
    if not model_path.is_absolute():
        model_path = sidecar_path.parent / model_path
    if not model_path.is_file():
        raise BackboneError(f"model file not found: {model_path}")

    norm = PixelNormalization(mean=tuple(meta["mean"]), std=tuple(meta["std"]))
    norm.validate()

    if fmt == "stub-linear":
        runner = _make_stub_runner(model_path, input_size)
    else:
        runner = _make_torchscript_runner(model_path)

    handle = BackboneHandle(
        id=str(meta["id"]),
        model_path=model_path,
        embedding_dim=embedding_dim,
        input_size=input_size,
        normalization=norm,
        pooling=pooling,
        format=fmt,
        source=str(meta.get("source", "")),
        _runner=runner,
    )

    probe = np.zeros((1, input_size, input_size, 3), dtype=np.float32)
    try:
        out = handle.run(probe)
    except BackboneError as e:
        raise BackboneError(f"probe inference failed for '{handle.id}': {e}") from e
    if out.shape != (1, embedding_dim):
        raise BackboneError(
            f"sidecar '{handle.id}' declares embedding_dim {embedding_dim} "
            f"but the model produced {out.shape}"
        )
    # Counters track dataset extraction only, not the load-time probe.
    handle.inference_batches = 0
    handle.inference_images = 0
    return handle


def write_stub_backbone(
    out_dir: str | Path,
    backbone_id: str,
    embedding_dim: int,
    input_size: int = 64,
    grid: int = 4,
    seed: int | None = None,
    W: np.ndarray | None = None,
    b: np.ndarray | None = None,
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0),
    std: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Path:
    """Write a stub-linear backbone (model .npz + sidecar .json); returns the sidecar path.

    With W/b omitted, W is a seeded uniform map over the grid features and b
    centers it at zero response for a mid-gray image. Pass explicit W=0 and a
    constant b to build a degenerate constant-output backbone.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_features = 3 * grid * grid
    if W is None:
        rng = np.random.default_rng(0 if seed is None else seed)
        W = rng.uniform(-1.0, 1.0, size=(embedding_dim, n_features))
        b = -W @ np.full(n_features, 0.5) if b is None else b
    W = np.asarray(W, dtype=np.float64)
    if b is None:
        b = np.zeros(embedding_dim)
    b = np.asarray(b, dtype=np.float64)
    if W.shape != (embedding_dim, n_features) or b.shape != (embedding_dim,):
        raise BackboneError(
            f"stub W must be ({embedding_dim}, {n_features}) and b ({embedding_dim},), "
            f"got {W.shape} and {b.shape}"
        )

    model_path = out_dir / f"{backbone_id}.npz"
    np.savez(model_path, W=W, b=b, grid=np.int64(grid))
    sidecar = {
        "id": backbone_id,
        "model": model_path.name,
        "format": "stub-linear",
        "embedding_dim": embedding_dim,
        "input_size": input_size,
        "mean": list(mean),
        "std": list(std),
        "pooling": "none",
        "source": "synthetic stub backbone",
    }
    sidecar_path = out_dir / f"{backbone_id}.json"
    sidecar_path.write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return sidecar_path
