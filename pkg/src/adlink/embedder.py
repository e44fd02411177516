"""Deterministic text embeddings, sidecar persistence, and modality fusion.

The hashing embedder is a seed-keyed character n-gram vectorizer: a
dependency-free stand-in for a neural text encoder that is bit-identical
across platforms. Externally computed embeddings enter through the sidecar
formats documented in the README (text ``EMB v1`` and binary ``EMBB v1``).
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import (
    DataError,
    as_float64_2d,
    check_unique_ids,
    l2_normalize_rows,
)


@dataclass
class EmbeddingMatrix:
    """Ids plus dense float64 row vectors; the currency between modules."""

    ids: tuple[str, ...]
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.ids = tuple(str(i) for i in self.ids)
        self.data = as_float64_2d(self.data, "data")
        if len(self.ids) != self.data.shape[0]:
            raise ValueError(
                f"{len(self.ids)} ids for {self.data.shape[0]} rows"
            )
        check_unique_ids(self.ids)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, ad_id: str) -> np.ndarray:
        return self.data[self.ids.index(ad_id)]

    def select(self, ids: Sequence[str]) -> "EmbeddingMatrix":
        """Reorder/subset rows by id; raises on unknown ids."""
        pos = {i: k for k, i in enumerate(self.ids)}
        try:
            rows = [pos[i] for i in ids]
        except KeyError as exc:
            raise KeyError(f"unknown id {exc.args[0]!r}") from exc
        return EmbeddingMatrix(
            ids=tuple(ids), data=self.data[rows].copy(), normalized=self.normalized
        )


def normalized_matrix(m: EmbeddingMatrix) -> EmbeddingMatrix:
    if m.normalized:
        return m
    data = l2_normalize_rows(m.data)
    ok = bool(np.all(np.linalg.norm(data, axis=1) > 0)) if len(m) else True
    return EmbeddingMatrix(ids=m.ids, data=data, normalized=ok)


# ---------------------------------------------------------------------------
# Hashing embedder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HashEmbedConfig:
    dim: int = 256
    ngram_min: int = 3
    ngram_max: int = 5
    seed: int = 0
    signed: bool = True

    def __post_init__(self):
        if self.dim < 8:
            raise ValueError(f"dim must be >= 8, got {self.dim}")
        if not (1 <= self.ngram_min <= self.ngram_max):
            raise ValueError(
                f"need 1 <= ngram_min <= ngram_max, got "
                f"({self.ngram_min}, {self.ngram_max})"
            )


def _hash_gram(gram: str, key: bytes) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def hash_embed_text(
    texts: Sequence[str],
    config: HashEmbedConfig = HashEmbedConfig(),
    ids: Sequence[str] | None = None,
) -> EmbeddingMatrix:
    """Embed texts via signed feature hashing of character n-grams.

    Lowercases, hashes each n-gram in the configured range into one of
    ``dim`` buckets with a seed-keyed hash, accumulates +-1 counts, and
    L2-normalizes each row. Pure function of (texts, config). Empty texts
    produce zero rows, which are left unnormalized and clear the matrix's
    normalized flag.
    """
    if ids is None:
        ids = tuple(str(i) for i in range(len(texts)))
    key = str(config.seed).encode("ascii")
    data = np.zeros((len(texts), config.dim), dtype=np.float64)
    cache: dict[str, tuple[int, float]] = {}
    for r, text in enumerate(texts):
        low = text.lower()
        grams: list[str] = []
        for n in range(config.ngram_min, config.ngram_max + 1):
            grams.extend(low[i : i + n] for i in range(len(low) - n + 1))
        if not grams and low:
            grams = [low]
        row = data[r]
        for g in grams:
            hit = cache.get(g)
            if hit is None:
                h = _hash_gram(g, key)
                sign = 1.0 if (not config.signed or h < (1 << 63)) else -1.0
                hit = (h % config.dim, sign)
                cache[g] = hit
            row[hit[0]] += hit[1]
    norms = np.linalg.norm(data, axis=1)
    nonzero = norms > 0
    data[nonzero] /= norms[nonzero, None]
    return EmbeddingMatrix(ids=tuple(ids), data=data, normalized=bool(nonzero.all()))


class HashingTextEmbedder(BaseEstimator, TransformerMixin):
    """Stateless sklearn-style transformer over the hashing embedder."""

    def __init__(self, dim=256, ngram_min=3, ngram_max=5, seed=0, signed=True):
        self.dim = dim
        self.ngram_min = ngram_min
        self.ngram_max = ngram_max
        self.seed = seed
        self.signed = signed

    def _config(self) -> HashEmbedConfig:
        return HashEmbedConfig(
            dim=self.dim,
            ngram_min=self.ngram_min,
            ngram_max=self.ngram_max,
            seed=self.seed,
            signed=self.signed,
        )

    def fit(self, X, y=None):
        self._config()  # validate parameters
        return self

    def transform(self, X) -> np.ndarray:
        return hash_embed_text(list(X), self._config()).data

    def embed(self, texts: Sequence[str], ids: Sequence[str] | None = None) -> EmbeddingMatrix:
        return hash_embed_text(list(texts), self._config(), ids=ids)


# ---------------------------------------------------------------------------
# Sidecar persistence
# ---------------------------------------------------------------------------

_TEXT_MAGIC = "EMB v1"
_BIN_MAGIC = "EMBB v1"


def save_embeddings(m: EmbeddingMatrix, path, binary: bool = False) -> None:
    if binary:
        _save_binary(m, path)
    else:
        _save_text(m, path)


def _save_text(m: EmbeddingMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{_TEXT_MAGIC} {len(m)} {m.dim} {1 if m.normalized else 0}\n")
        for ad_id, row in zip(m.ids, m.data):
            fh.write(ad_id + "\t" + ",".join(repr(float(x)) for x in row) + "\n")


def _save_binary(m: EmbeddingMatrix, path) -> None:
    n, d = len(m), m.dim
    blob = bytearray()
    blob += f"{_BIN_MAGIC} {n} {d} {1 if m.normalized else 0}\n".encode("ascii")
    for ad_id in m.ids:
        raw = ad_id.encode("utf-8")
        blob += struct.pack("<I", len(raw)) + raw
    for i in range(n):
        blob += struct.pack("<Q", i * d * 8)
    blob += np.ascontiguousarray(m.data, dtype="<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def _parse_header(parts: list[str], magic: str, path) -> tuple[int, int, bool]:
    if len(parts) != 5 or " ".join(parts[:2]) != magic:
        raise DataError(f"{path}: malformed header {' '.join(parts)!r}")
    try:
        n, d, norm = int(parts[2]), int(parts[3]), int(parts[4])
    except ValueError as exc:
        raise DataError(f"{path}: malformed header counts") from exc
    if norm not in (0, 1) or n < 0 or d < 1:
        raise DataError(f"{path}: malformed header values")
    return n, d, bool(norm)


def load_embeddings(path, expect_dim: int | None = None) -> EmbeddingMatrix:
    """Load a sidecar file (text or binary variant, detected by magic)."""
    with open(path, "rb") as fh:
        head = fh.read(5)
    if head.startswith(b"EMBB "):
        m = _load_binary(path)
    elif head.startswith(b"EMB "):
        m = _load_text(path)
    else:
        raise DataError(f"{path}: unrecognized sidecar magic {head!r}")
    if expect_dim is not None and m.dim != expect_dim:
        raise DataError(
            f"{path}: dimension mismatch, file has D={m.dim}, expected {expect_dim}"
        )
    return m


def _load_text(path) -> EmbeddingMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        n, d, norm = _parse_header(header.split(" "), _TEXT_MAGIC, path)
        ids: list[str] = []
        rows = np.empty((n, d), dtype=np.float64)
        for i in range(n):
            line = fh.readline().rstrip("\n")
            if not line:
                raise DataError(f"{path}: expected {n} rows, got {i}")
            ad_id, _, payload = line.partition("\t")
            values = payload.split(",")
            if len(values) != d:
                raise DataError(
                    f"{path}: row {i} has {len(values)} values, expected {d}"
                )
            ids.append(ad_id)
            rows[i] = [float(v) for v in values]
    try:
        check_unique_ids(ids)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return EmbeddingMatrix(ids=tuple(ids), data=rows, normalized=norm)


def _load_binary(path) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise DataError(f"{path}: truncated file")
    stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored:
        raise DataError(f"{path}: checksum mismatch")
    newline = blob.index(b"\n")
    n, d, norm = _parse_header(blob[:newline].decode("ascii").split(" "), _BIN_MAGIC, path)
    off = newline + 1
    ids: list[str] = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        ids.append(blob[off : off + length].decode("utf-8"))
        off += length
    offsets = struct.unpack_from(f"<{n}Q", blob, off)
    off += 8 * n
    expected = tuple(i * d * 8 for i in range(n))
    if offsets != expected:
        raise DataError(f"{path}: corrupt offset table")
    payload = blob[off : off + n * d * 8]
    if len(payload) != n * d * 8:
        raise DataError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype="<f8").reshape(n, d).astype(np.float64)
    try:
        check_unique_ids(ids)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return EmbeddingMatrix(ids=tuple(ids), data=data, normalized=norm)


def sidecar_checksum_ok(path) -> bool:
    """Recompute the trailing checksum of a binary sidecar."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"EMBB ") or len(blob) < 4:
        raise DataError(f"{path}: not a binary sidecar")
    return zlib.crc32(blob[:-4]) == struct.unpack("<I", blob[-4:])[0]


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

FUSION_STRATEGIES = ("mean", "concat", "attention", "gated")


@dataclass
class GatedFusionParams:
    w_gate: np.ndarray  # (2D, D)
    b_gate: np.ndarray  # (D,)
    w_text: np.ndarray  # (D, D)
    w_image: np.ndarray  # (D, D)


@dataclass
class AttentionFusionParams:
    w_query: np.ndarray  # (D, D)
    w_key: np.ndarray  # (D, D)
    w_value: np.ndarray  # (D, D)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def init_gated_params(dim: int, seed: int) -> GatedFusionParams:
    rng = np.random.default_rng(seed)
    return GatedFusionParams(
        w_gate=_uniform(rng, (2 * dim, dim)),
        b_gate=np.zeros(dim),
        w_text=_uniform(rng, (dim, dim)),
        w_image=_uniform(rng, (dim, dim)),
    )


def init_attention_params(dim: int, seed: int) -> AttentionFusionParams:
    rng = np.random.default_rng(seed)
    return AttentionFusionParams(
        w_query=_uniform(rng, (dim, dim)),
        w_key=_uniform(rng, (dim, dim)),
        w_value=_uniform(rng, (dim, dim)),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def fuse(
    text: EmbeddingMatrix,
    image: EmbeddingMatrix,
    strategy: str = "mean",
    params=None,
) -> EmbeddingMatrix:
    """Combine aligned text and image embeddings into one representation.

    All strategies re-L2-normalize the output; downstream retrieval is
    cosine, so only direction matters. ``attention`` and ``gated`` require
    their parameter bundles (see ``init_attention_params`` /
    ``init_gated_params``).
    """
    if strategy not in FUSION_STRATEGIES:
        raise ValueError(f"unknown fusion strategy {strategy!r}")
    if text.ids != image.ids:
        pairs = [(a, b) for a, b in zip(text.ids, image.ids) if a != b]
        detail = f"first mismatch {pairs[0]}" if pairs else "length mismatch"
        raise ValueError(f"text/image ids are not aligned ({detail})")
    t, v = text.data, image.data
    if strategy != "concat" and t.shape[1] != v.shape[1]:
        raise ValueError(
            f"{strategy} fusion needs equal dims, got {t.shape[1]} and {v.shape[1]}"
        )
    if strategy == "mean":
        fused = (t + v) / 2.0
    elif strategy == "concat":
        fused = np.hstack([t, v])
    elif strategy == "attention":
        if not isinstance(params, AttentionFusionParams):
            raise ValueError("attention fusion requires AttentionFusionParams")
        d = t.shape[1]
        q_t, q_v = t @ params.w_query, v @ params.w_query
        k_t, k_v = t @ params.w_key, v @ params.w_key
        v_t, v_v = t @ params.w_value, v @ params.w_value
        scale = 1.0 / np.sqrt(d)
        s = np.stack(
            [
                np.sum(q_t * k_t, axis=1),
                np.sum(q_t * k_v, axis=1),
                np.sum(q_v * k_t, axis=1),
                np.sum(q_v * k_v, axis=1),
            ],
            axis=1,
        ) * scale
        a_t = np.exp(s[:, :2] - s[:, :2].max(axis=1, keepdims=True))
        a_t /= a_t.sum(axis=1, keepdims=True)
        a_v = np.exp(s[:, 2:] - s[:, 2:].max(axis=1, keepdims=True))
        a_v /= a_v.sum(axis=1, keepdims=True)
        attended_t = a_t[:, :1] * v_t + a_t[:, 1:] * v_v
        attended_v = a_v[:, :1] * v_t + a_v[:, 1:] * v_v
        fused = (attended_t + attended_v) / 2.0
    else:  # gated
        if not isinstance(params, GatedFusionParams):
            raise ValueError("gated fusion requires GatedFusionParams")
        g = _sigmoid(np.hstack([t, v]) @ params.w_gate + params.b_gate)
        fused = g * (t @ params.w_text) + (1.0 - g) * (v @ params.w_image)
    data = l2_normalize_rows(fused)
    ok = bool(np.all(np.linalg.norm(data, axis=1) > 0)) if len(text) else True
    return EmbeddingMatrix(ids=text.ids, data=data, normalized=ok)


class ModalityFusion(BaseEstimator, TransformerMixin):
    """Fusion as a transformer over horizontally stacked [text | image] rows.

    ``text_dim`` marks the split column; ``fit`` seeds parameters for the
    learned strategies.
    """

    def __init__(self, strategy="mean", text_dim=None, seed=0):
        self.strategy = strategy
        self.text_dim = text_dim
        self.seed = seed

    def _split(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = as_float64_2d(X, "X")
        split = self.text_dim if self.text_dim is not None else X.shape[1] // 2
        if not 0 < split < X.shape[1]:
            raise ValueError(f"text_dim {split} out of range for width {X.shape[1]}")
        return X[:, :split], X[:, split:]

    def fit(self, X, y=None):
        if self.strategy not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")
        t, v = self._split(X)
        if self.strategy == "gated":
            self.params_ = init_gated_params(t.shape[1], self.seed)
        elif self.strategy == "attention":
            self.params_ = init_attention_params(t.shape[1], self.seed)
        else:
            self.params_ = None
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise ValueError("ModalityFusion is not fitted")
        t, v = self._split(X)
        ids = tuple(str(i) for i in range(t.shape[0]))
        out = fuse(
            EmbeddingMatrix(ids, t),
            EmbeddingMatrix(ids, v),
            strategy=self.strategy,
            params=self.params_,
        )
        return out.data
