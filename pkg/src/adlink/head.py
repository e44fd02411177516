"""Trainable projection + classifier over fixed embeddings.

The head is a projection followed by a linear classifier (optionally with
a ReLU between them), so every gradient is hand-derived and checkable by
finite differences. Cross-entropy acts on the classifier logits;
contrastive losses act on the L2-normalized projection output, which is
also the retrieval representation.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .embedder import EmbeddingMatrix
from .metrics import classification_report
from .objectives import (
    Batch,
    LossOutput,
    LossWeights,
    ce_loss,
    mined_triplet_loss,
    supcon_loss,
)
from .validation import DataError, as_float64_2d, as_labels, l2_normalize_rows

OBJECTIVES = ("ce", "ce_supcon", "ce_triplet", "supcon", "triplet")
_CONTRASTIVE = {"ce_supcon", "ce_triplet", "supcon", "triplet"}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    schedule: str = "warmup_linear"
    batch_size: int = 32
    temperature: float = 0.1
    triplet_margin: float = 1.0
    in_batch_negatives: int = 5
    loss_weights: LossWeights = LossWeights()
    max_epochs: int = 50
    patience: int = 10
    seed: int = 1111

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "adam_eps", "temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ValueError("batch_size must be >= 1; max_epochs/patience >= 0")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ValueError("warmup_steps and weight_decay must be >= 0")


ACTIVATIONS = ("none", "relu")


@dataclass
class HeadParams:
    w_proj: np.ndarray  # (D, H)
    b_proj: np.ndarray  # (H,)
    w_cls: np.ndarray  # (H, V)
    b_cls: np.ndarray  # (V,)
    activation: str = "none"  # "relu" turns the projection into a hidden layer
    fusion: object | None = None  # owned here when fusion is learned

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def copy(self) -> "HeadParams":
        return HeadParams(
            w_proj=self.w_proj.copy(),
            b_proj=self.b_proj.copy(),
            w_cls=self.w_cls.copy(),
            b_cls=self.b_cls.copy(),
            activation=self.activation,
            fusion=self.fusion,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "w_proj": self.w_proj,
            "b_proj": self.b_proj,
            "w_cls": self.w_cls,
            "b_cls": self.b_cls,
        }

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w_proj.shape[0], self.w_proj.shape[1], self.w_cls.shape[1]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_macro_f1: float
    wall_clock_s: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    selected_epoch: int = 0

    def to_dict(self) -> dict:
        return {
            "selected_epoch": self.selected_epoch,
            "epochs": [
                {
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "val_loss": e.val_loss,
                    "val_macro_f1": e.val_macro_f1,
                    "wall_clock_s": e.wall_clock_s,
                }
                for e in self.epochs
            ],
        }


def init_head(d: int, h: int, v: int, seed: int, activation: str = "none") -> HeadParams:
    """Seeded uniform init scaled by 1/sqrt(fan_in); zero biases."""
    if min(d, h, v) < 1:
        raise ValueError(f"dims must be >= 1, got D={d}, H={h}, V={v}")
    rng = np.random.default_rng(seed)
    a_proj = 1.0 / np.sqrt(d)
    a_cls = 1.0 / np.sqrt(h)
    return HeadParams(
        w_proj=rng.uniform(-a_proj, a_proj, size=(d, h)),
        b_proj=np.zeros(h),
        w_cls=rng.uniform(-a_cls, a_cls, size=(h, v)),
        b_cls=np.zeros(v),
        activation=activation,
    )


def lr_at_step(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup over ``warmup_steps`` then linear decay to 0 at the end.

    ``step`` is 1-based and counts optimizer updates.
    """
    warm = config.warmup_steps
    if warm > 0 and step <= warm:
        return config.lr * step / warm
    if total_steps <= warm:
        return 0.0
    return config.lr * max(0.0, (total_steps - step) / (total_steps - warm))


def head_objective(
    arrays: Mapping[str, np.ndarray],
    x: np.ndarray,
    y: np.ndarray,
    objective: str,
    config: TrainConfig,
    fixed_triplets=None,
    activation: str = "none",
) -> LossOutput:
    """Composed loss and gradients w.r.t. the head parameter arrays.

    Triplet mining is a discrete selection treated as constant by the
    analytic gradient; pass ``fixed_triplets`` to pin it (finite-difference
    checks must evaluate the same selection everywhere). ``activation``
    "relu" turns the projection into a hidden layer (subgradient 0 at 0).
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    w_proj, b_proj = arrays["w_proj"], arrays["b_proj"]
    w_cls, b_cls = arrays["w_cls"], arrays["b_cls"]
    pre = x @ w_proj + b_proj
    proj = np.maximum(pre, 0.0) if activation == "relu" else pre
    weights = config.loss_weights
    total = 0.0
    d_proj = np.zeros_like(proj)
    grads = {k: np.zeros_like(v) for k, v in arrays.items()}

    if objective in ("ce", "ce_supcon", "ce_triplet"):
        logits = proj @ w_cls + b_cls
        part = ce_loss(logits, y)
        d_logits = weights.w_ce * part.grads["logits"]
        total += weights.w_ce * part.loss
        grads["w_cls"] += proj.T @ d_logits
        grads["b_cls"] += d_logits.sum(axis=0)
        d_proj += d_logits @ w_cls.T

    if objective in ("ce_supcon", "supcon", "ce_triplet", "triplet"):
        norms = np.linalg.norm(proj, axis=1, keepdims=True)
        safe = np.where(norms == 0.0, 1.0, norms)
        z = proj / safe
        if objective in ("ce_supcon", "supcon"):
            w = weights.w_supcon
            part = supcon_loss(Batch(z, y), temperature=config.temperature)
        else:
            w = weights.w_triplet
            part = mined_triplet_loss(
                Batch(z, y),
                margin=config.triplet_margin,
                num_negatives=config.in_batch_negatives,
                triplets=fixed_triplets,
            )
        total += w * part.loss
        g_z = w * part.grads["embeddings"]
        # through row normalization: dproj = (g - (g.z) z) / ||proj||
        inner = np.sum(g_z * z, axis=1, keepdims=True)
        d_proj += (g_z - inner * z) / safe

    if activation == "relu":
        d_proj = d_proj * (pre > 0)
    grads["w_proj"] += x.T @ d_proj
    grads["b_proj"] += d_proj.sum(axis=0)
    return LossOutput(loss=float(total), grads=grads)


def _plain_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _paired_batches(
    y: np.ndarray, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Label-aware batches: every included label contributes >= 2 samples.

    Samples whose label appears once in the training set cannot join a
    contrastive batch and are skipped. Batches may exceed ``batch_size`` by
    one when a trio is packed last.
    """
    groups: list[np.ndarray] = []
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        if idx.size < 2:
            continue
        idx = idx[rng.permutation(idx.size)]
        even = idx.size - (idx.size % 2)
        pairs = [idx[i : i + 2] for i in range(0, even, 2)]
        if idx.size % 2:
            pairs[-1] = np.concatenate([pairs[-1], idx[-1:]])
        groups.extend(pairs)
    if not groups:
        raise DataError(
            "contrastive training needs at least one label with >= 2 samples"
        )
    batches: list[np.ndarray] = []
    current: list[np.ndarray] = []
    size = 0
    for gi in rng.permutation(len(groups)):
        g = groups[gi]
        if size and size + len(g) > batch_size:
            batches.append(np.concatenate(current))
            current, size = [], 0
        current.append(g)
        size += len(g)
    if current:
        batches.append(np.concatenate(current))
    return batches


def _adamw_update(
    arrays: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: dict[str, tuple[np.ndarray, np.ndarray]],
    lr: float,
    config: TrainConfig,
    t: int,
) -> None:
    b1, b2 = config.beta1, config.beta2
    for name, p in arrays.items():
        g = grads[name]
        m, v = state[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * (m_hat / (np.sqrt(v_hat) + config.adam_eps) + config.weight_decay * p)


def _project(arrays: Mapping[str, np.ndarray], x: np.ndarray, activation: str) -> np.ndarray:
    pre = x @ arrays["w_proj"] + arrays["b_proj"]
    return np.maximum(pre, 0.0) if activation == "relu" else pre


def _nearest_centroid_predict(
    z_train: np.ndarray, y_train: np.ndarray, z_eval: np.ndarray
) -> np.ndarray:
    labels = np.unique(y_train)
    centroids = np.stack([z_train[y_train == c].mean(axis=0) for c in labels])
    centroids = l2_normalize_rows(centroids)
    return labels[np.argmax(z_eval @ centroids.T, axis=1)]


def _val_macro_f1(
    params_arrays: dict[str, np.ndarray],
    objective: str,
    activation: str,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
) -> float:
    proj_val = _project(params_arrays, x_val, activation)
    if objective in ("supcon", "triplet"):
        # classifier is untrained for metric-only objectives; probe the
        # representation with nearest-centroid classification instead
        proj_train = _project(params_arrays, x_train, activation)
        preds = _nearest_centroid_predict(
            l2_normalize_rows(proj_train), y_train, l2_normalize_rows(proj_val)
        )
    else:
        logits = proj_val @ params_arrays["w_cls"] + params_arrays["b_cls"]
        preds = np.argmax(logits, axis=1)
    return classification_report(preds, y_val)["macro_f1"]


def train_head(
    params: HeadParams,
    x: np.ndarray,
    y,
    config: TrainConfig = TrainConfig(),
    objective: str = "ce_supcon",
    x_val: np.ndarray | None = None,
    y_val=None,
) -> tuple[HeadParams, TrainHistory]:
    """AdamW training with linear warmup then linear decay to zero.

    Returns the parameters of the epoch with the best validation macro-F1
    (ties break toward the earlier epoch) and the per-epoch history. Fully
    deterministic given (data, config, seed); wall-clock fields are the one
    exception. When no validation split is given the training split doubles
    as one.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    x = as_float64_2d(x, "x")
    y = as_labels(y, x.shape[0])
    d, h, v = params.dims
    if x.shape[1] != d:
        raise ValueError(f"embedding dim {x.shape[1]} != head input dim {d}")
    if y.min(initial=0) < 0 or (y.size and y.max() >= v):
        raise ValueError(f"labels must lie in [0, {v})")
    contrastive = objective in _CONTRASTIVE
    if contrastive and config.batch_size < 2:
        raise ValueError("contrastive objectives need batch_size >= 2")
    if x_val is None:
        x_val, y_val = x, y
    else:
        x_val = as_float64_2d(x_val, "x_val")
        y_val = as_labels(y_val, x_val.shape[0])

    best = params.copy()
    history = TrainHistory()
    if config.max_epochs == 0:
        return best, history

    arrays = {k: a.copy() for k, a in params.arrays().items()}
    state = {k: (np.zeros_like(a), np.zeros_like(a)) for k, a in arrays.items()}

    def make_batches(epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([config.seed, epoch])
        if contrastive:
            return _paired_batches(y, config.batch_size, rng)
        return _plain_batches(x.shape[0], config.batch_size, rng)

    total_steps = config.max_epochs * len(make_batches(0))
    best_f1 = -np.inf
    best_epoch = 0
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        losses = []
        for batch_idx in make_batches(epoch):
            out = head_objective(
                arrays, x[batch_idx], y[batch_idx], objective, config,
                activation=params.activation,
            )
            if not np.isfinite(out.loss):
                raise FloatingPointError(
                    f"non-finite loss {out.loss!r} at step {step + 1}"
                )
            step += 1
            _adamw_update(arrays, out.grads, state, lr_at_step(config, step, total_steps), config, step)
            losses.append(out.loss)
        val_out = head_objective(arrays, x_val, y_val, "ce", config, activation=params.activation)
        val_f1 = _val_macro_f1(arrays, objective, params.activation, x, y, x_val, y_val)
        history.epochs.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_loss=float(val_out.loss),
                val_macro_f1=float(val_f1),
                wall_clock_s=time.perf_counter() - started,
            )
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best = HeadParams(
                w_proj=arrays["w_proj"].copy(),
                b_proj=arrays["b_proj"].copy(),
                w_cls=arrays["w_cls"].copy(),
                b_cls=arrays["b_cls"].copy(),
                activation=params.activation,
                fusion=params.fusion,
            )
        elif epoch - best_epoch >= config.patience > 0:
            break
    history.selected_epoch = best_epoch
    return best, history


def predict(params: HeadParams, embeddings) -> tuple[np.ndarray, np.ndarray]:
    """Classifier logits and argmax labels (ties -> smallest class index)."""
    x = embeddings.data if isinstance(embeddings, EmbeddingMatrix) else as_float64_2d(embeddings, "embeddings")
    d = params.w_proj.shape[0]
    if x.shape[1] != d:
        raise ValueError(f"embedding dim {x.shape[1]} != head input dim {d}")
    logits = _project(params.arrays(), x, params.activation) @ params.w_cls + params.b_cls
    return logits, np.argmax(logits, axis=1)


def encode(params: HeadParams, embeddings):
    """L2-normalized projection output: the retrieval representation."""
    if isinstance(embeddings, EmbeddingMatrix):
        data = encode(params, embeddings.data)
        ok = bool(np.all(np.linalg.norm(data, axis=1) > 0)) if len(data) else True
        return EmbeddingMatrix(ids=embeddings.ids, data=data, normalized=ok)
    x = as_float64_2d(embeddings, "embeddings")
    d = params.w_proj.shape[0]
    if x.shape[1] != d:
        raise ValueError(f"embedding dim {x.shape[1]} != head input dim {d}")
    return l2_normalize_rows(_project(params.arrays(), x, params.activation))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "HEADCKPT v1"


def save_checkpoint(params: HeadParams, path) -> None:
    """Versioned header + shape table + little-endian f64 payload + crc32."""
    arrays = params.arrays()
    blob = bytearray()
    blob += f"{_CKPT_MAGIC} {len(arrays)} {params.activation}\n".encode("ascii")
    for name, arr in arrays.items():
        dims = " ".join(str(s) for s in arr.shape)
        blob += f"{name} {dims}\n".encode("ascii")
    for arr in arrays.values():
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path, expect_shapes: Mapping[str, tuple[int, ...]] | None = None) -> HeadParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise DataError(f"{path}: truncated checkpoint")
    if zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise DataError(f"{path}: checksum mismatch")
    body = blob[:-4]
    newline = body.index(b"\n")
    header = body[:newline].decode("ascii").split(" ")
    if " ".join(header[:2]) != _CKPT_MAGIC or len(header) != 4:
        raise DataError(f"{path}: bad checkpoint magic")
    n_arrays = int(header[2])
    activation = header[3]
    if activation not in ACTIVATIONS:
        raise DataError(f"{path}: unknown activation {activation!r}")
    off = newline + 1
    shapes: dict[str, tuple[int, ...]] = {}
    for _ in range(n_arrays):
        end = body.index(b"\n", off)
        parts = body[off:end].decode("ascii").split(" ")
        shapes[parts[0]] = tuple(int(s) for s in parts[1:])
        off = end + 1
    expected_names = {"w_proj", "b_proj", "w_cls", "b_cls"}
    if set(shapes) != expected_names:
        raise DataError(f"{path}: shape table names {sorted(shapes)} != {sorted(expected_names)}")
    if expect_shapes is not None:
        for name, shape in expect_shapes.items():
            if shapes.get(name) != tuple(shape):
                raise DataError(
                    f"{path}: shape mismatch for {name}: file has "
                    f"{shapes.get(name)}, expected {tuple(shape)}"
                )
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arrays[name] = (
            np.frombuffer(body[off : off + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        )
        off += nbytes
    if off != len(body):
        raise DataError(f"{path}: payload size mismatch")
    return HeadParams(activation=activation, **arrays)


# ---------------------------------------------------------------------------
# Estimator facade
# ---------------------------------------------------------------------------


class VendorHead(BaseEstimator, TransformerMixin):
    """sklearn-style classifier/encoder over fixed embeddings.

    ``fit`` trains with the configured multitask objective, ``predict``
    returns vendor labels, ``transform`` returns L2-normalized retrieval
    representations.
    """

    def __init__(self, hidden_dim=256, objective="ce_supcon", config=None, seed=None,
                 activation="none"):
        self.hidden_dim = hidden_dim
        self.objective = objective
        self.config = config
        self.seed = seed
        self.activation = activation

    def _resolved_config(self) -> TrainConfig:
        config = self.config if self.config is not None else TrainConfig()
        if self.seed is not None:
            config = replace(config, seed=self.seed)
        return config

    def fit(self, X, y, X_val=None, y_val=None):
        config = self._resolved_config()
        X = as_float64_2d(X, "X")
        y = as_labels(y, X.shape[0])
        n_classes = int(y.max()) + 1 if y.size else 1
        params = init_head(
            X.shape[1], self.hidden_dim, n_classes, config.seed, activation=self.activation
        )
        self.params_, self.history_ = train_head(
            params, X, y, config, self.objective, X_val, y_val
        )
        self.classes_ = np.arange(n_classes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise ValueError("VendorHead is not fitted")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        return predict(self.params_, X)[1]

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        return predict(self.params_, X)[0]

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        out = encode(self.params_, X)
        return out.data if isinstance(out, EmbeddingMatrix) else out

    def score(self, X, y) -> float:
        return classification_report(self.predict(X), y)["macro_f1"]
