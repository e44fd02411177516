"""Exact cosine-similarity retrieval over normalized document embeddings.

The index is a flat matrix scanned with blocked matrix products; no
approximation. Ties in score break toward the lexicographically smaller
doc id, so results are deterministic and reproducible across runs and
worker counts.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .embedder import EmbeddingMatrix, load_embeddings, save_embeddings
from .validation import DataError, as_float64_2d, check_unique_ids

_QUERY_BLOCK = 128


@dataclass
class FlatIndex:
    doc_ids: tuple[str, ...]
    matrix: np.ndarray  # (N, D), unit rows
    dim: int
    size: int
    checksum: str
    id_rank: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.id_rank is None:
            order = sorted(range(self.size), key=lambda i: self.doc_ids[i])
            rank = np.empty(self.size, dtype=np.int64)
            rank[order] = np.arange(self.size)
            self.id_rank = rank


def _matrix_checksum(ids: Sequence[str], data: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=16)
    for i in ids:
        h.update(i.encode("utf-8") + b"\x00")
    h.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return h.hexdigest()


def build_index(docs: EmbeddingMatrix) -> FlatIndex:
    """Normalize rows (if needed) and freeze an immutable flat index."""
    if len(docs) < 1:
        raise ValueError("index needs at least one document")
    check_unique_ids(docs.ids, "doc_ids")
    data = np.array(docs.data, dtype=np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DataError(f"document {docs.ids[zero[0]]!r} has a zero embedding")
    if not docs.normalized or np.abs(norms - 1.0).max() > 1e-9:
        data /= norms[:, None]
    return FlatIndex(
        doc_ids=docs.ids,
        matrix=data,
        dim=data.shape[1],
        size=data.shape[0],
        checksum=_matrix_checksum(docs.ids, data),
    )


def _topk_row(
    row: np.ndarray, k: int, id_rank: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    n = row.shape[0]
    if k >= n:
        cand = np.arange(n)
    else:
        kth = np.partition(row, n - k)[n - k]
        cand = np.flatnonzero(row >= kth)  # top-k plus boundary-tie peers
    order = np.lexsort((id_rank[cand], -row[cand]))
    top = cand[order[:k]]
    return top, row[top]


def _topk_block(
    scores: np.ndarray, ks: np.ndarray, id_rank: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact per-row top-k with (score desc, id asc) ordering."""
    b, n = scores.shape
    if ks.shape[0] != 1 or ks[0] >= n:
        per_row = ks if ks.shape[0] > 1 else np.repeat(ks, b)
        return [_topk_row(scores[r], int(per_row[r]), id_rank) for r in range(b)]
    # uniform cutoff: vectorized candidate selection for the whole block
    k = int(ks[0])
    boundary = n - k  # >= 1 here; positions of the (k+1)th and kth largest
    part_vals = np.partition(scores, [boundary - 1, boundary], axis=1)
    tie = part_vals[:, boundary - 1] == part_vals[:, boundary]
    cand = np.argpartition(scores, boundary, axis=1)[:, boundary:]
    cand_scores = np.take_along_axis(scores, cand, axis=1)
    order = np.lexsort((id_rank[cand], -cand_scores), axis=1)
    top = np.take_along_axis(cand, order, axis=1)
    vals = np.take_along_axis(cand_scores, order, axis=1)
    out: list[tuple[np.ndarray, np.ndarray]] = []
    for r in range(b):
        if tie[r]:
            out.append(_topk_row(scores[r], k, id_rank))
        else:
            out.append((top[r], vals[r]))
    return out


def search(
    idx: FlatIndex,
    queries: EmbeddingMatrix | np.ndarray,
    k,
    workers: int = 1,
) -> list[list[tuple[str, float]]]:
    """Exact top-k cosine search; returns per-query (doc_id, score) lists.

    ``k`` is a scalar cutoff or one cutoff per query. Scores are
    non-increasing within a list; equal scores order by ascending doc id.
    Parallel sharding over query blocks is read-only and yields output
    identical to the serial path.
    """
    q = queries.data if isinstance(queries, EmbeddingMatrix) else as_float64_2d(queries, "queries")
    if q.shape[1] != idx.dim:
        raise ValueError(f"query dim {q.shape[1]} != index dim {idx.dim}")
    nq = q.shape[0]
    ks = np.atleast_1d(np.asarray(k, dtype=np.int64))
    if ks.shape[0] not in (1, nq):
        raise ValueError(f"k must be scalar or length {nq}, got length {ks.shape[0]}")
    if ks.min(initial=1) < 1:
        raise ValueError("every k must be >= 1")
    if ks.max(initial=1) > idx.size:
        raise ValueError(f"k={int(ks.max())} exceeds index size {idx.size}")

    doc_t = np.ascontiguousarray(idx.matrix.T)

    def run_block(start: int, stop: int) -> list[tuple[np.ndarray, np.ndarray]]:
        scores = q[start:stop] @ doc_t
        block_ks = ks if ks.shape[0] == 1 else ks[start:stop]
        return _topk_block(scores, block_ks, idx.id_rank)

    bounds = [(s, min(s + _QUERY_BLOCK, nq)) for s in range(0, nq, _QUERY_BLOCK)]
    if workers <= 1 or len(bounds) <= 1:
        blocks = [run_block(s, e) for s, e in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(lambda be: run_block(*be), bounds))
    results: list[list[tuple[str, float]]] = []
    for block in blocks:
        for top, vals in block:
            results.append(
                [(idx.doc_ids[i], float(v)) for i, v in zip(top, vals)]
            )
    return results


def save_index(idx: FlatIndex, path) -> None:
    save_embeddings(
        EmbeddingMatrix(ids=idx.doc_ids, data=idx.matrix, normalized=True),
        path,
        binary=True,
    )


def load_index(path) -> FlatIndex:
    return build_index(load_embeddings(path))


class CosineIndex(BaseEstimator):
    """NearestNeighbors-flavored wrapper: ``fit`` documents, then ``search``."""

    def __init__(self, workers=1):
        self.workers = workers

    def fit(self, X, ids: Sequence[str] | None = None):
        if isinstance(X, EmbeddingMatrix):
            m = X
        else:
            X = as_float64_2d(X, "X")
            if ids is None:
                ids = tuple(str(i) for i in range(X.shape[0]))
            m = EmbeddingMatrix(ids=tuple(ids), data=X)
        self.index_ = build_index(m)
        return self

    def search(self, queries, k) -> list[list[tuple[str, float]]]:
        if not hasattr(self, "index_"):
            raise ValueError("CosineIndex is not fitted")
        return search(self.index_, queries, k, workers=self.workers)

    def kneighbors(self, X, n_neighbors=10) -> tuple[np.ndarray, np.ndarray]:
        """sklearn-style (similarities, indices) arrays for a scalar cutoff."""
        hits = self.search(X, n_neighbors)
        pos = {i: r for r, i in enumerate(self.index_.doc_ids)}
        sim = np.array([[s for _, s in row] for row in hits])
        ind = np.array([[pos[i] for i, _ in row] for row in hits])
        return sim, ind
