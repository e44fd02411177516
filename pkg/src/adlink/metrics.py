"""Retrieval metrics with per-vendor aggregation, plus classification metrics.

Every retrieval metric is computed per query, averaged within each vendor,
and reported as mean +- population std across vendors. ``X`` cutoffs equal
the number of relevant documents for the query's vendor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


@dataclass
class RetrievalRun:
    """Ranked doc ids per query, plus vendor lookups for both sides."""

    rankings: Mapping[str, Sequence[str]]
    query_vendor: Mapping[str, int]
    doc_vendor: Mapping[str, int]

    def __post_init__(self):
        for qid, ranked in self.rankings.items():
            if qid not in self.query_vendor:
                raise ValueError(f"query {qid!r} has no vendor")
            if len(set(ranked)) != len(ranked):
                raise ValueError(f"query {qid!r} ranking contains duplicates")
            for doc in ranked:
                if doc not in self.doc_vendor:
                    raise ValueError(f"ranked doc {doc!r} has no vendor")


@dataclass
class MetricReport:
    metric: str
    per_vendor: dict[int, float]
    mean: float
    std: float
    support: dict[int, int] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "mean": self.mean,
            "std": self.std,
            "per_vendor": {str(k): v for k, v in sorted(self.per_vendor.items())},
            "support": {str(k): v for k, v in sorted(self.support.items())},
            "flags": sorted(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _aggregate(
    metric: str,
    per_query: Mapping[str, float],
    query_vendor: Mapping[str, int],
    flags: list[str],
) -> MetricReport:
    by_vendor: dict[int, list[float]] = {}
    for qid, value in per_query.items():
        by_vendor.setdefault(query_vendor[qid], []).append(value)
    per_vendor = {v: float(np.mean(vals)) for v, vals in by_vendor.items()}
    support = {v: len(vals) for v, vals in by_vendor.items()}
    values = np.array(sorted(per_vendor.values()), dtype=np.float64)
    mean = float(values.mean()) if values.size else 0.0
    std = float(values.std()) if values.size else 0.0
    return MetricReport(
        metric=metric,
        per_vendor=per_vendor,
        mean=mean,
        std=std,
        support=support,
        flags=flags,
    )


def _relevant_counts(run: RetrievalRun) -> dict[int, int]:
    counts: dict[int, int] = {}
    for vendor in run.doc_vendor.values():
        counts[vendor] = counts.get(vendor, 0) + 1
    return counts


def mrr_at_k(run: RetrievalRun, k: int = 10) -> MetricReport:
    """Reciprocal rank of the first same-vendor document within the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    doc_counts = _relevant_counts(run)
    flags: list[str] = []
    per_query: dict[str, float] = {}
    for qid, ranked in run.rankings.items():
        vendor = run.query_vendor[qid]
        if doc_counts.get(vendor, 0) == 0:
            flags.append(f"query {qid!r}: vendor {vendor} absent from documents")
        rr = 0.0
        for rank, doc in enumerate(ranked[:k], start=1):
            if run.doc_vendor[doc] == vendor:
                rr = 1.0 / rank
                break
        per_query[qid] = rr
    return _aggregate(f"mrr@{k}", per_query, run.query_vendor, flags)


def r_precision_at_x(run: RetrievalRun, on_missing: str = "error") -> MetricReport:
    """Hits within the top X over X, where X is the query vendor's number of
    relevant documents. ``on_missing`` decides how to treat queries whose
    vendor has no documents: ``error`` (default) or ``zero`` (scored 0 and
    flagged)."""
    if on_missing not in ("error", "zero"):
        raise ValueError(f"on_missing must be 'error' or 'zero', got {on_missing!r}")
    doc_counts = _relevant_counts(run)
    flags: list[str] = []
    per_query: dict[str, float] = {}
    for qid, ranked in run.rankings.items():
        vendor = run.query_vendor[qid]
        x = doc_counts.get(vendor, 0)
        if x == 0:
            if on_missing == "error":
                raise ValueError(
                    f"query {qid!r}: vendor {vendor} has no relevant documents (X=0)"
                )
            flags.append(f"query {qid!r}: vendor {vendor} absent from documents")
            per_query[qid] = 0.0
            continue
        hits = sum(1 for doc in ranked[:x] if run.doc_vendor[doc] == vendor)
        per_query[qid] = hits / x
    return _aggregate("r_precision@x", per_query, run.query_vendor, flags)


def macro_f1_at_x(run: RetrievalRun, on_missing: str = "error") -> MetricReport:
    """Per-vendor F1 at the per-vendor cutoff X, averaged over vendors.

    A vendor's retrievals are pooled across its queries: precision over the
    pooled retrieved items, recall over the pooled relevant slots (sum of X
    over queries), F1 the harmonic mean (0 when undefined).
    """
    if on_missing not in ("error", "zero"):
        raise ValueError(f"on_missing must be 'error' or 'zero', got {on_missing!r}")
    doc_counts = _relevant_counts(run)
    flags: list[str] = []
    pooled: dict[int, list[int]] = {}  # vendor -> [hits, retrieved, slots, queries]
    for qid, ranked in run.rankings.items():
        vendor = run.query_vendor[qid]
        x = doc_counts.get(vendor, 0)
        if x == 0:
            if on_missing == "error":
                raise ValueError(
                    f"query {qid!r}: vendor {vendor} has no relevant documents (X=0)"
                )
            flags.append(f"query {qid!r}: vendor {vendor} absent from documents")
        stats = pooled.setdefault(vendor, [0, 0, 0, 0])
        top = ranked[:x]
        stats[0] += sum(1 for doc in top if run.doc_vendor[doc] == vendor)
        stats[1] += len(top)
        stats[2] += x
        stats[3] += 1
    per_vendor: dict[int, float] = {}
    support: dict[int, int] = {}
    for vendor, (hits, retrieved, slots, n_queries) in pooled.items():
        precision = hits / retrieved if retrieved else 0.0
        recall = hits / slots if slots else 0.0
        if precision + recall == 0.0:
            f1 = 0.0
        else:
            f1 = 2.0 * precision * recall / (precision + recall)
        per_vendor[vendor] = f1
        support[vendor] = n_queries
    values = np.array(sorted(per_vendor.values()), dtype=np.float64)
    return MetricReport(
        metric="macro_f1@x",
        per_vendor=per_vendor,
        mean=float(values.mean()) if values.size else 0.0,
        std=float(values.std()) if values.size else 0.0,
        support=support,
        flags=flags,
    )


def classification_report(preds, truth) -> dict[str, float]:
    """Accuracy, balanced accuracy, and micro/weighted/macro F1.

    Classes are the union of truth and predictions; classes never seen in
    truth contribute an F1 of 0 to the macro average.
    """
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if preds.shape[0] != truth.shape[0]:
        raise ValueError(
            f"length mismatch: {preds.shape[0]} predictions vs {truth.shape[0]} labels"
        )
    if preds.shape[0] == 0:
        raise ValueError("empty inputs")
    classes = sorted(set(truth.tolist()) | set(preds.tolist()))
    n = truth.shape[0]
    f1s: list[float] = []
    recalls_present: list[float] = []
    weighted = 0.0
    for c in classes:
        tp = int(np.sum((preds == c) & (truth == c)))
        fp = int(np.sum((preds == c) & (truth != c)))
        fn = int(np.sum((preds != c) & (truth == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        f1s.append(f1)
        support = tp + fn
        if support:
            recalls_present.append(recall)
            weighted += (support / n) * f1
    accuracy = float(np.mean(preds == truth))
    return {
        "accuracy": accuracy,
        "balanced_accuracy": float(np.mean(recalls_present)),
        "micro_f1": accuracy,
        "weighted_f1": float(weighted),
        "macro_f1": float(np.mean(f1s)),
    }
