"""Loss functions with analytic gradients, and a finite-difference checker.

All losses operate on float64 arrays and return a ``LossOutput`` bundling
the scalar loss with gradients per named input. Contrastive losses expect
L2-normalized rows (callers normalize; the functions themselves stay
differentiable off the unit sphere so gradient checking can perturb
coordinates freely).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .validation import as_float64_2d, as_labels, check_positive


@dataclass
class Batch:
    """Embeddings with vendor labels, the unit fed to contrastive losses."""

    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = as_float64_2d(self.embeddings, "embeddings")
        self.labels = as_labels(self.labels, self.embeddings.shape[0])


@dataclass
class LossOutput:
    """Scalar loss plus gradients keyed by the differentiated input."""

    loss: float
    grads: dict[str, np.ndarray]

    @property
    def grad(self) -> np.ndarray:
        if len(self.grads) != 1:
            raise ValueError(
                f"LossOutput holds {len(self.grads)} gradients; use .grads"
            )
        return next(iter(self.grads.values()))


@dataclass(frozen=True)
class LossWeights:
    w_ce: float = 1.0
    w_supcon: float = 1.0
    w_triplet: float = 1.0
    w_itc: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {
            "ce": self.w_ce,
            "supcon": self.w_supcon,
            "triplet": self.w_triplet,
            "itc": self.w_itc,
        }


def _log_softmax_rows(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-stabilized (log_softmax, softmax)."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    return log_p, np.exp(log_p)


def ce_loss(logits: np.ndarray, labels) -> LossOutput:
    """Mean cross-entropy over rows; grad w.r.t. the logits."""
    logits = as_float64_2d(logits, "logits")
    n, c = logits.shape
    if n < 1:
        raise ValueError("ce_loss needs at least one row")
    labels = as_labels(labels, n)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    log_p, p = _log_softmax_rows(logits)
    loss = -log_p[np.arange(n), labels].mean()
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return LossOutput(loss=float(loss), grads={"logits": grad})


def supcon_loss(batch: Batch, temperature: float = 0.1) -> LossOutput:
    """Supervised contrastive loss, mean-over-positives-outside-the-log form.

    For each anchor the positives are the other same-label rows and the
    denominator runs over every other row. Gradient is returned w.r.t. the
    embeddings.
    """
    check_positive(temperature, "temperature")
    z = batch.embeddings
    y = batch.labels
    n = z.shape[0]
    if n < 2:
        raise ValueError(f"contrastive batch needs N >= 2, got {n}")
    pos_mask = (y[:, None] == y[None, :]).astype(np.float64)
    np.fill_diagonal(pos_mask, 0.0)
    pos_counts = pos_mask.sum(axis=1)
    if np.any(pos_counts == 0):
        bad = int(np.flatnonzero(pos_counts == 0)[0])
        raise ValueError(
            f"anchor with label {int(y[bad])} has no positive in the batch"
        )
    scores = z @ z.T / temperature
    # exclude self-similarity from every row's normalizer
    np.fill_diagonal(scores, -np.inf)
    log_p, q = _log_softmax_rows(scores)
    pos_log_p = np.where(pos_mask > 0, log_p, 0.0)  # avoid 0 * -inf
    per_anchor = -pos_log_p.sum(axis=1) / pos_counts
    loss = per_anchor.mean()
    g_scores = (q - pos_mask / pos_counts[:, None]) / n
    np.fill_diagonal(g_scores, 0.0)
    grad = (g_scores + g_scores.T) @ z / temperature
    return LossOutput(loss=float(loss), grads={"embeddings": grad})


def triplet_loss(
    anchors: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    margin: float = 1.0,
) -> LossOutput:
    """Margin hinge on Euclidean anchor-positive vs anchor-negative distances.

    Subgradient 0 is used at the hinge boundary and at zero distances.
    """
    a = as_float64_2d(anchors, "anchors")
    p = as_float64_2d(positives, "positives")
    ng = as_float64_2d(negatives, "negatives")
    if not (a.shape == p.shape == ng.shape):
        raise ValueError(
            f"triplet shapes differ: {a.shape}, {p.shape}, {ng.shape}"
        )
    t = a.shape[0]
    zeros = {
        "anchors": np.zeros_like(a),
        "positives": np.zeros_like(p),
        "negatives": np.zeros_like(ng),
    }
    if t == 0:
        return LossOutput(loss=0.0, grads=zeros)
    d_ap = np.linalg.norm(a - p, axis=1)
    d_an = np.linalg.norm(a - ng, axis=1)
    violation = d_ap - d_an + margin
    active = violation > 0
    loss = float(np.where(active, violation, 0.0).mean())
    ga, gp, gn = zeros["anchors"], zeros["positives"], zeros["negatives"]
    for i in np.flatnonzero(active):
        if d_ap[i] > 0:
            u_ap = (a[i] - p[i]) / d_ap[i]
            ga[i] += u_ap / t
            gp[i] -= u_ap / t
        if d_an[i] > 0:
            u_an = (a[i] - ng[i]) / d_an[i]
            ga[i] -= u_an / t
            gn[i] += u_an / t
    return LossOutput(loss=loss, grads={"anchors": ga, "positives": gp, "negatives": gn})


def mine_triplets(
    batch: Batch, num_negatives: int = 5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build in-batch triplets: every same-label pair as (anchor, positive),
    crossed with each anchor's ``num_negatives`` hardest (closest in
    Euclidean distance) different-label rows. Distance ties break toward
    the lower row index.

    Returns (anchor_idx, positive_idx, negative_idx) arrays; empty when the
    batch has no valid triplet.
    """
    if num_negatives < 1:
        raise ValueError(f"num_negatives must be >= 1, got {num_negatives}")
    z = batch.embeddings
    y = batch.labels
    n = z.shape[0]
    sq = np.sum(z * z, axis=1)
    d2 = np.maximum(sq[:, None] - 2.0 * (z @ z.T) + sq[None, :], 0.0)
    a_idx: list[int] = []
    p_idx: list[int] = []
    n_idx: list[int] = []
    for i in range(n):
        pos = np.flatnonzero((y == y[i]) & (np.arange(n) != i))
        neg = np.flatnonzero(y != y[i])
        if pos.size == 0 or neg.size == 0:
            continue
        order = np.lexsort((neg, d2[i, neg]))
        hard = neg[order[:num_negatives]]
        for j in pos:
            for m in hard:
                a_idx.append(i)
                p_idx.append(int(j))
                n_idx.append(int(m))
    return (
        np.asarray(a_idx, dtype=np.int64),
        np.asarray(p_idx, dtype=np.int64),
        np.asarray(n_idx, dtype=np.int64),
    )


def mined_triplet_loss(
    batch: Batch,
    margin: float = 1.0,
    num_negatives: int = 5,
    triplets: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> LossOutput:
    """Triplet loss over mined in-batch triplets, gradient on the embeddings.

    Mining is a discrete selection; pass ``triplets`` to hold it fixed
    (the convention assumed by the analytic gradient).
    """
    if triplets is None:
        triplets = mine_triplets(batch, num_negatives)
    a_idx, p_idx, n_idx = triplets
    z = batch.embeddings
    if a_idx.size == 0:
        return LossOutput(loss=0.0, grads={"embeddings": np.zeros_like(z)})
    out = triplet_loss(z[a_idx], z[p_idx], z[n_idx], margin=margin)
    grad = np.zeros_like(z)
    np.add.at(grad, a_idx, out.grads["anchors"])
    np.add.at(grad, p_idx, out.grads["positives"])
    np.add.at(grad, n_idx, out.grads["negatives"])
    return LossOutput(loss=out.loss, grads={"embeddings": grad})


def ntxent_itc_loss(
    text_emb: np.ndarray, image_emb: np.ndarray, temperature: float = 0.1
) -> LossOutput:
    """Symmetric InfoNCE aligning row-paired text and image embeddings.

    Row i of both matrices belongs to the same ad; the in-batch rows of the
    other modality act as negatives. Returns gradients for both inputs.
    """
    check_positive(temperature, "temperature")
    t = as_float64_2d(text_emb, "text_emb")
    v = as_float64_2d(image_emb, "image_emb")
    if t.shape != v.shape:
        raise ValueError(f"text/image shapes differ: {t.shape} vs {v.shape}")
    n = t.shape[0]
    if n < 2:
        raise ValueError(f"alignment batch needs N >= 2, got {n}")
    scores = t @ v.T / temperature
    targets = np.arange(n)
    log_p_t2i, p_t2i = _log_softmax_rows(scores)
    log_p_i2t, p_i2t = _log_softmax_rows(scores.T)
    loss = -0.5 * (
        log_p_t2i[targets, targets].mean() + log_p_i2t[targets, targets].mean()
    )
    eye = np.eye(n)
    g_scores = 0.5 * ((p_t2i - eye) + (p_i2t - eye).T) / n
    grad_t = g_scores @ v / temperature
    grad_v = g_scores.T @ t / temperature
    return LossOutput(loss=float(loss), grads={"text_emb": grad_t, "image_emb": grad_v})


def joint_loss(parts: Mapping[str, LossOutput], weights: LossWeights) -> LossOutput:
    """Weighted sum of computed loss components.

    ``parts`` keys name components (``ce``, ``supcon``, ``triplet``,
    ``itc``); gradients on the same input name accumulate, disjoint names
    stay separate parameter groups.
    """
    wmap = weights.as_dict()
    if any(w < 0 for w in wmap.values()):
        raise ValueError("loss weights must be non-negative")
    if all(w == 0 for w in wmap.values()):
        raise ValueError("at least one loss weight must be positive")
    unknown = set(parts) - set(wmap)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for name in sorted(parts):
        w = wmap[name]
        part = parts[name]
        total += w * part.loss
        for key, g in part.grads.items():
            if key in grads:
                grads[key] = grads[key] + w * g
            else:
                grads[key] = w * g
    return LossOutput(loss=float(total), grads=grads)


def grad_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], LossOutput],
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` receives a dict of float64 arrays and returns a
    ``LossOutput`` whose gradient keys are a subset of the input names.
    The relative error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps!r}")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    analytic = loss_fn(base)
    if not np.isfinite(analytic.loss):
        raise FloatingPointError(f"loss is non-finite at the base point: {analytic.loss!r}")
    worst = 0.0
    for name in sorted(analytic.grads):
        grad = analytic.grads[name]
        arr = base[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_fn(base).loss
            arr[idx] = orig - eps
            down = loss_fn(base).loss
            arr[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(
                    f"loss is non-finite at perturbed point {name}{idx}"
                )
            numeric = (up - down) / (2.0 * eps)
            a = grad[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
