"""Classification heads on embeddings: forward/backward, focal loss, ADAM,
feature-space Gaussian-noise augmentation, the training loop, and checkpoints.

Architecture is a dense network with zero or one ReLU hidden layer and a
softmax output. Everything is plain numpy with fixed iteration order, so a
fixed seed reproduces training byte for byte. Validation and test data are
never noise-augmented.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError
from .metrics import balanced_accuracy, confusion, per_class_metrics
from .store import EmbeddingDataset

PARAM_KEYS = ("W1", "b1", "W2", "b2")

_P_FLOOR = 1e-12


@dataclass(frozen=True)
class HeadConfig:
    """Hyperparameters of one head training run.

    ``hidden_dim=None`` gives a single dense layer (the backbone-selection
    protocol); an integer adds one ReLU hidden layer of that width.
    ``alpha=None`` means inverse-frequency class weights computed from the
    train split: alpha_c = N / (num_classes * count_c).
    """

    input_dim: int
    num_classes: int
    hidden_dim: int | None = None
    gamma: float = 2.0
    alpha: tuple[float, ...] | None = None
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    noise_sigma: float = 0.1
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    val_metric: str = "auto"  # auto | balanced_accuracy | f1

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be None or >= 1, got {self.hidden_dim}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.alpha is not None:
            if len(self.alpha) != self.num_classes:
                raise ConfigError(
                    f"alpha length {len(self.alpha)} != num_classes {self.num_classes}"
                )
            if any(a <= 0 for a in self.alpha):
                raise ConfigError("alpha components must be > 0")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not (0.0 <= b < 1.0):
                raise ConfigError(f"{name} must be in [0, 1), got {b}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.val_metric not in ("auto", "balanced_accuracy", "f1"):
            raise ConfigError(f"unknown val_metric {self.val_metric!r}")

    def resolved_val_metric(self) -> str:
        if self.val_metric != "auto":
            return self.val_metric
        return "f1" if self.num_classes == 2 else "balanced_accuracy"

    def to_dict(self) -> dict:
        d = {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dim": self.hidden_dim,
            "gamma": self.gamma,
            "alpha": list(self.alpha) if self.alpha is not None else None,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "noise_sigma": self.noise_sigma,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "val_metric": self.val_metric,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown head config keys: {sorted(unknown)}")
        if known.get("alpha") is not None:
            known["alpha"] = tuple(known["alpha"])
        cfg = cls(**known)
        cfg.validate()
        return cfg


@dataclass
class HeadModel:
    """Parameters plus ADAM state. ``params`` holds W1/b1 only with a hidden layer."""

    config: HeadConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    t: int = 0

    def param_keys(self) -> tuple[str, ...]:
        return tuple(k for k in PARAM_KEYS if k in self.params)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def init_head(cfg: HeadConfig) -> HeadModel:
    """Seeded Glorot-uniform weights, zero biases, zero ADAM moments.

    Weight limits are sqrt(6 / (fan_in + fan_out)); draw order is W1 then W2
    so byte-level reproducibility holds for a fixed config and seed.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    params: dict[str, np.ndarray] = {}
    if cfg.hidden_dim is not None:
        limit = np.sqrt(6.0 / (cfg.input_dim + cfg.hidden_dim))
        params["W1"] = rng.uniform(-limit, limit, size=(cfg.hidden_dim, cfg.input_dim))
        params["b1"] = np.zeros(cfg.hidden_dim)
        in2 = cfg.hidden_dim
    else:
        in2 = cfg.input_dim
    limit = np.sqrt(6.0 / (in2 + cfg.num_classes))
    params["W2"] = rng.uniform(-limit, limit, size=(cfg.num_classes, in2))
    params["b2"] = np.zeros(cfg.num_classes)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return HeadModel(
        config=cfg,
        params=params,
        adam_m=zeros,
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_batch(m: HeadModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Probabilities plus the hidden activations/mask needed for backward."""
    if x.ndim != 2 or x.shape[1] != m.config.input_dim:
        raise ConfigError(
            f"input has shape {x.shape}, expected (n, {m.config.input_dim})"
        )
    if "W1" in m.params:
        z1 = x @ m.params["W1"].T + m.params["b1"]
        h = np.maximum(z1, 0.0)
        mask = (z1 > 0.0).astype(x.dtype)
    else:
        h = x
        mask = None
    z2 = h @ m.params["W2"].T + m.params["b2"]
    return _softmax(z2), h, mask


def forward(m: HeadModel, x: np.ndarray) -> np.ndarray:
    """Probability vector for one embedding; components sum to 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ConfigError(f"forward expects a vector, got shape {x.shape}")
    p, _, _ = _forward_batch(m, x[None, :])
    return p[0]


def focal_loss(p: np.ndarray, y: int, gamma: float, alpha) -> float:
    """FL = -alpha_y * (1 - p_y)^gamma * log(p_y); p_y floored at 1e-12.

    With gamma=0 and unit alpha this is exactly cross-entropy.
    """
    p = np.asarray(p, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    py = min(max(float(p[y]), _P_FLOOR), 1.0)
    return float(-alpha[y] * (1.0 - py) ** gamma * np.log(py))


def _focal_loss_batch(p: np.ndarray, y: np.ndarray, gamma: float, alpha: np.ndarray) -> np.ndarray:
    py = np.clip(p[np.arange(len(y)), y], _P_FLOOR, 1.0)
    return -alpha[y] * (1.0 - py) ** gamma * np.log(py)


def backward(m: HeadModel, batch_x: np.ndarray, batch_y: np.ndarray, gamma: float, alpha) -> dict:
    """Mean-over-batch analytic gradients of the focal loss.

    The logit gradient is c * (onehot - p) with
    c = alpha_y * (gamma * p_y * (1-p_y)^(gamma-1) * log(p_y) - (1-p_y)^gamma),
    which reduces to the classic alpha_y * (p - onehot) form at gamma=0.
    """
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("backward needs a non-empty (n, input_dim) batch")
    alpha = np.asarray(alpha, dtype=np.float64)
    n = x.shape[0]

    p, h, mask = _forward_batch(m, x)
    s = np.clip(p[np.arange(n), y], _P_FLOOR, 1.0 - 1e-15)
    if gamma == 0.0:
        c = -alpha[y]
    else:
        one_minus = 1.0 - s
        c = alpha[y] * (gamma * s * one_minus ** (gamma - 1.0) * np.log(s) - one_minus**gamma)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), y] = 1.0
    g_z2 = c[:, None] * (onehot - p)

    grads: dict[str, np.ndarray] = {
        "W2": g_z2.T @ h / n,
        "b2": g_z2.mean(axis=0),
    }
    if mask is not None:
        g_h = (g_z2 @ m.params["W2"]) * mask
        grads["W1"] = g_h.T @ x / n
        grads["b1"] = g_h.mean(axis=0)
    return grads


def adam_step(
    m: HeadModel,
    grads: dict,
    lr: float,
    beta1: float,
    beta2: float,
    epsilon: float,
) -> HeadModel:
    """One ADAM update, mutating and returning the model.

    The step counter increments before bias correction, so the very first
    step has magnitude ~lr for any nonzero constant gradient.
    """
    m.t += 1
    for k in m.param_keys():
        g = grads[k]
        m.adam_m[k] = beta1 * m.adam_m[k] + (1.0 - beta1) * g
        m.adam_v[k] = beta2 * m.adam_v[k] + (1.0 - beta2) * (g * g)
        m_hat = m.adam_m[k] / (1.0 - beta1**m.t)
        v_hat = m.adam_v[k] / (1.0 - beta2**m.t)
        m.params[k] = m.params[k] - lr * m_hat / (np.sqrt(v_hat) + epsilon)
    return m


def add_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Fresh Gaussian perturbation per presentation; identity at sigma=0."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x
    return x + rng.normal(0.0, sigma, size=x.shape)


def _predict_matrix(m: HeadModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    proba, _, _ = _forward_batch(m, np.asarray(x, dtype=np.float64))
    return proba.argmax(axis=1), proba


def predict(m: HeadModel, ds: EmbeddingDataset | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class per row (ties break to the lowest index) plus probabilities."""
    x = ds.data if isinstance(ds, EmbeddingDataset) else np.asarray(ds)
    if x.ndim != 2 or x.shape[1] != m.config.input_dim:
        raise ConfigError(f"dataset dim {x.shape} does not match input_dim {m.config.input_dim}")
    return _predict_matrix(m, x)


@dataclass
class TrainingLog:
    """Per-epoch train loss and validation metric, plus the best epoch."""

    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_metric: float = float("-inf")
    val_metric_name: str = "balanced_accuracy"
    stopped_early: bool = False

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_metric"]
        for r in self.rows:
            lines.append(f"{r['epoch']},{r['train_loss']!r},{r['val_metric']!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "best_epoch": self.best_epoch,
            "best_val_metric": self.best_val_metric,
            "val_metric_name": self.val_metric_name,
            "stopped_early": self.stopped_early,
        }


def inverse_frequency_alpha(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """alpha_c = N / (num_classes * count_c); absent classes weighted as count 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(
        np.float64
    )
    n = counts.sum()
    return n / (num_classes * np.maximum(counts, 1.0))


def _val_score(metric: str, y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    cm = confusion(y_true, y_pred, num_classes)
    if metric == "balanced_accuracy":
        return balanced_accuracy(cm)
    # Positive-class F1 for binary tasks; class 1 is the positive class.
    return per_class_metrics(cm)[1]["f1"]


def train(
    train_ds: EmbeddingDataset,
    val_ds: EmbeddingDataset,
    cfg: HeadConfig,
) -> tuple[HeadModel, TrainingLog]:
    """Seeded minibatch focal-loss ADAM training with early stopping.

    Each epoch: shuffle, noise-augment the train batches (fresh draws per
    presentation), step; then score the clean validation split. The best
    validation snapshot is kept and restored at the end. Two runs with the
    same seed produce identical parameters and logs, byte for byte.
    """
    cfg.validate()
    for name, ds in (("train", train_ds), ("validation", val_ds)):
        if ds.dim != cfg.input_dim:
            raise ConfigError(f"{name} store dim {ds.dim} != config input_dim {cfg.input_dim}")
        if ds.rows == 0:
            raise ConfigError(f"{name} store is empty")
        if int(ds.labels.max()) >= cfg.num_classes:
            raise ConfigError(f"{name} store has label >= num_classes {cfg.num_classes}")

    x_train = train_ds.data.astype(np.float64)
    y_train = train_ds.labels.astype(np.int64)
    x_val = val_ds.data.astype(np.float64)
    y_val = val_ds.labels.astype(np.int64)

    alpha = (
        np.asarray(cfg.alpha, dtype=np.float64)
        if cfg.alpha is not None
        else inverse_frequency_alpha(y_train, cfg.num_classes)
    )

    model = init_head(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    metric_name = cfg.resolved_val_metric()
    log = TrainingLog(val_metric_name=metric_name)

    best_params = model.copy_params()
    best_metric = float("-inf")
    best_epoch = 0
    epochs_since_best = 0
    n = x_train.shape[0]

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = add_noise(x_train[idx], cfg.noise_sigma, rng)
            yb = y_train[idx]
            p, _, _ = _forward_batch(model, xb)
            loss_sum += float(_focal_loss_batch(p, yb, cfg.gamma, alpha).sum())
            grads = backward(model, xb, yb, cfg.gamma, alpha)
            adam_step(model, grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)

        train_loss = loss_sum / n
        val_pred, _ = _predict_matrix(model, x_val)
        val_metric = _val_score(metric_name, y_val, val_pred, cfg.num_classes)
        log.rows.append({"epoch": epoch, "train_loss": train_loss, "val_metric": val_metric})

        if val_metric > best_metric:
            best_metric = val_metric
            best_epoch = epoch
            best_params = model.copy_params()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                log.stopped_early = True
                break

    model.params = best_params
    log.best_epoch = best_epoch
    log.best_val_metric = best_metric
    return model, log


# --- checkpoint I/O ---------------------------------------------------------

CHECKPOINT_MAGIC = b"DFLH"
CHECKPOINT_VERSION = 1


def _write_array(f, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<B", a.ndim))
    for d in a.shape:
        f.write(struct.pack("<I", d))
    f.write(a.tobytes())


def _read_array(f) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, count * 4), dtype="<f4").reshape(shape)
    return data.astype(np.float64)


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def save_checkpoint(
    model: HeadModel,
    path,
    class_names: list[str] | None = None,
    views: list[dict] | None = None,
    include_adam: bool = False,
) -> None:
    """Write a "DFLH" checkpoint: config echo, f32 parameter blobs, optional ADAM state."""
    meta = {
        "config": model.config.to_dict(),
        "class_names": class_names,
        "views": views,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    keys = model.param_keys()
    buf.write(struct.pack("<B", len(keys)))
    for k in keys:
        _write_array(buf, model.params[k])
    buf.write(struct.pack("<B", 1 if include_adam else 0))
    if include_adam:
        buf.write(struct.pack("<Q", model.t))
        for k in keys:
            _write_array(buf, model.adam_m[k])
        for k in keys:
            _write_array(buf, model.adam_v[k])
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[HeadModel, dict]:
    """Read a checkpoint back into a model plus its metadata dict."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<H", _read_exact(f, 2))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            meta = json.loads(_read_exact(f, blob_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: malformed metadata blob: {e}") from e
        cfg = HeadConfig.from_dict(meta["config"])
        (n_params,) = struct.unpack("<B", _read_exact(f, 1))
        expected = ("W1", "b1", "W2", "b2") if cfg.hidden_dim is not None else ("W2", "b2")
        if n_params != len(expected):
            raise CheckpointError(
                f"{path}: {n_params} parameter blobs, config implies {len(expected)}"
            )
        params = {k: _read_array(f) for k in expected}
        (has_adam,) = struct.unpack("<B", _read_exact(f, 1))
        t = 0
        adam_m = {k: np.zeros_like(v) for k, v in params.items()}
        adam_v = {k: np.zeros_like(v) for k, v in params.items()}
        if has_adam:
            (t,) = struct.unpack("<Q", _read_exact(f, 8))
            adam_m = {k: _read_array(f) for k in expected}
            adam_v = {k: _read_array(f) for k in expected}
    model = HeadModel(config=cfg, params=params, adam_m=adam_m, adam_v=adam_v, t=t)
    return model, meta
