"""Experiment orchestration at desk scale.

Provides a seeded synthetic corpus generator (Gaussian vendor clusters on
the unit sphere, with a knob for how strongly image clusters align with
text clusters), closed-set identification runs, open-set retrieval runs
with OOD regions, and the shared/unique vendor breakdown.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .communities import VendorCommunities, build_communities
from .embedder import (
    EmbeddingMatrix,
    fuse,
    init_attention_params,
    init_gated_params,
    normalized_matrix,
)
from .head import HeadParams, TrainConfig, encode, init_head, train_head, predict
from .index import build_index, search
from .metrics import (
    MetricReport,
    RetrievalRun,
    classification_report,
    macro_f1_at_x,
    mrr_at_k,
    r_precision_at_x,
)
from .records import (
    DEFAULT_SPLIT_RATIOS,
    MaskedAd,
    MultimodalSample,
    expand_samples,
    sample_id,
    split_dataset,
)
from .validation import DataError

MODALITIES = ("text", "vision", "multimodal")
RETRIEVAL_MODES = ("t2t", "i2i", "multimodal")
_MODALITY_TO_MODE = {"text": "t2t", "vision": "i2i", "multimodal": "multimodal"}


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic corpus.

    Vendors form confusable pairs per modality: paired vendors share a
    dominant cluster direction and differ by a ``twin_separation`` offset,
    and the pairing differs between text and vision. Each modality alone
    nearly confuses its pair; together they identify the vendor, which is
    what makes the modalities complementary. ``rho`` additionally
    interpolates each sample's image center between the vendor's center
    (1.0) and a random direction (0.0).

    ``nuisance_scale`` > 0 adds high-variance components along
    ``nuisance_dims`` shared directions per modality (independent between
    modalities): the analog of style/topic variance that pollutes raw
    cosine similarity but is projected out by discriminative training.
    """

    vendors: int = 40
    ads_per_vendor: int = 10
    images_per_ad: int = 5
    cluster_spread: float = 0.06
    rho: float = 0.7
    twin_separation: float = 0.9
    nuisance_dims: int = 8
    nuisance_scale: float = 0.3
    text_dim: int = 64
    image_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.vendors < 2:
            raise ValueError("need at least 2 vendors")
        if self.ads_per_vendor < 2:
            raise ValueError("need at least 2 ads per vendor")
        if self.images_per_ad < 1:
            raise ValueError("need at least 1 image per ad")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.cluster_spread < 0 or self.twin_separation < 0:
            raise ValueError("cluster_spread and twin_separation must be >= 0")
        if self.nuisance_dims < 0 or self.nuisance_scale < 0:
            raise ValueError("nuisance_dims and nuisance_scale must be >= 0")


@dataclass
class SyntheticCorpus:
    region: str
    ads: list[MaskedAd]
    samples: list[MultimodalSample]
    text_emb: EmbeddingMatrix  # one row per ad
    image_emb: EmbeddingMatrix  # one row per (ad, image) sample
    communities: VendorCommunities

    @property
    def identifier_set(self) -> frozenset[str]:
        out: set[str] = set()
        for ad in self.ads:
            out.update(ad.identifiers)
        return frozenset(out)


_SYLLABLES = (
    "ba be bi bo bu da de di do du fa fe fi fo fu ka ke ki ko ku "
    "la le li lo lu ma me mi mo mu na ne ni no nu ra re ri ro ru "
    "sa se si so su ta te ti to tu va ve vi vo vu za ze zi zo zu"
).split()


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def _word(rng: np.random.Generator) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(rng.integers(2, 4)))


def _group_direction(spec: SyntheticSpec, modality: int, group: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 5, modality, group])
    return _unit(rng.standard_normal(dim))


def _nuisance_basis(spec: SyntheticSpec, modality: int, dim: int) -> np.ndarray | None:
    if spec.nuisance_scale == 0.0 or spec.nuisance_dims == 0:
        return None
    rng = np.random.default_rng([spec.seed, 3, modality])
    basis, _ = np.linalg.qr(rng.standard_normal((dim, spec.nuisance_dims)))
    return basis


def _vendor_profile(spec: SyntheticSpec, uid: int) -> dict:
    rng = np.random.default_rng([spec.seed, 7, uid])
    delta = spec.twin_separation
    # text pairs {0,1}, {2,3}, ...; image pairs shifted by one so the
    # intersection of a vendor's two groups is unique
    text_group = uid // 2
    image_group = (uid + 1) // 2
    center_text = _unit(
        _group_direction(spec, 0, text_group, spec.text_dim)
        + delta * rng.standard_normal(spec.text_dim) / np.sqrt(spec.text_dim)
    )
    center_image = _unit(
        _group_direction(spec, 1, image_group, spec.image_dim)
        + delta * rng.standard_normal(spec.image_dim) / np.sqrt(spec.image_dim)
    )
    return {
        "uid": uid,
        "center_text": center_text,
        "center_image": center_image,
        "phone": f"555{uid % 10_000_000:07d}",
        "vocab": [_word(rng) for _ in range(8)],
    }


def generate_synthetic(
    spec: SyntheticSpec,
    region: str = "South",
    vendor_uids: Sequence[int] | None = None,
) -> SyntheticCorpus:
    """Deterministic synthetic corpus: one Gaussian cluster per vendor and
    modality. ``rho`` interpolates each sample's image cluster center
    between the vendor's center (1.0) and a random direction (0.0)."""
    if vendor_uids is None:
        vendor_uids = range(spec.vendors)
    vendor_uids = list(vendor_uids)
    region_tag = region.lower()
    rng = np.random.default_rng([spec.seed, 11, _region_stream(region)])
    nuisance_text = _nuisance_basis(spec, 0, spec.text_dim)
    nuisance_image = _nuisance_basis(spec, 1, spec.image_dim)

    def _nuisance(basis: np.ndarray | None) -> np.ndarray | float:
        if basis is None:
            return 0.0
        return basis @ (spec.nuisance_scale * rng.standard_normal(spec.nuisance_dims))

    ads: list[MaskedAd] = []
    text_rows: list[np.ndarray] = []
    image_rows: list[np.ndarray] = []
    image_ids: list[str] = []
    for uid in vendor_uids:
        profile = _vendor_profile(spec, uid)
        for j in range(spec.ads_per_vendor):
            ad_id = f"{region_tag}-{uid:05d}-{j:03d}"
            words = list(profile["vocab"])
            words.extend(_word(rng) for _ in range(4))
            title = " ".join(words[:3])
            body = " ".join(words[3:])
            ads.append(
                MaskedAd(
                    id=ad_id,
                    region=region,
                    text=f"{title} [SEP] {body}",
                    identifiers=frozenset({profile["phone"]}),
                    image_refs=tuple(f"img{t}" for t in range(spec.images_per_ad)),
                )
            )
            text_rows.append(
                _unit(
                    profile["center_text"]
                    + spec.cluster_spread * rng.standard_normal(spec.text_dim)
                    + _nuisance(nuisance_text)
                )
            )
            for t in range(spec.images_per_ad):
                direction = _unit(rng.standard_normal(spec.image_dim))
                center = _unit(
                    spec.rho * profile["center_image"] + (1.0 - spec.rho) * direction
                )
                image_rows.append(
                    _unit(
                        center
                        + spec.cluster_spread * rng.standard_normal(spec.image_dim)
                        + _nuisance(nuisance_image)
                    )
                )
                image_ids.append(f"{ad_id}:img{t}")
    communities = build_communities(ads)
    samples = expand_samples(ads, communities.labels)
    return SyntheticCorpus(
        region=region,
        ads=ads,
        samples=samples,
        text_emb=EmbeddingMatrix(
            ids=tuple(ad.id for ad in ads),
            data=np.vstack(text_rows),
            normalized=True,
        ),
        image_emb=EmbeddingMatrix(
            ids=tuple(image_ids), data=np.vstack(image_rows), normalized=True
        ),
        communities=communities,
    )


def _region_stream(region: str) -> int:
    return int.from_bytes(region.encode("utf-8")[:4].ljust(4, b"\x00"), "little")


def make_regional_corpora(
    spec: SyntheticSpec,
    regions: Sequence[str] = ("South", "Midwest", "West", "Northeast"),
    shared_fraction: float = 0.5,
) -> dict[str, SyntheticCorpus]:
    """One corpus per region; the first region is the training region.

    Each other region reuses ``shared_fraction`` of the training vendors
    (same cluster centers and phone numbers, so communities link across
    regions) and fills the rest with vendors unique to it.
    """
    if not regions:
        raise ValueError("need at least one region")
    if not 0.0 <= shared_fraction <= 1.0:
        raise ValueError("shared_fraction must lie in [0, 1]")
    corpora: dict[str, SyntheticCorpus] = {}
    train_uids = list(range(spec.vendors))
    corpora[regions[0]] = generate_synthetic(spec, regions[0], train_uids)
    n_shared = int(round(shared_fraction * spec.vendors))
    next_uid = spec.vendors
    for region in regions[1:]:
        rng = np.random.default_rng([spec.seed, 13, _region_stream(region)])
        shared = sorted(rng.choice(spec.vendors, size=n_shared, replace=False).tolist())
        unique = list(range(next_uid, next_uid + spec.vendors - n_shared))
        next_uid += len(unique)
        corpora[region] = generate_synthetic(spec, region, shared + unique)
    return corpora


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    train_region: str = "South"
    eval_regions: tuple[str, ...] = ()
    modality: str = "text"
    fusion_strategy: str = "mean"
    objective: str = "ce_supcon"  # head objective, or "passthrough"
    train: TrainConfig = TrainConfig()
    retrieval_mode: str | None = None
    hidden_dim: int = 32
    seed: int = 1111

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.retrieval_mode is not None and self.retrieval_mode not in RETRIEVAL_MODES:
            raise ValueError(f"unknown retrieval mode {self.retrieval_mode!r}")
        if not self.train_region:
            raise ValueError("train_region must be set")

    @property
    def resolved_retrieval_mode(self) -> str:
        return self.retrieval_mode or _MODALITY_TO_MODE[self.modality]

    def echo(self) -> dict:
        out = asdict(self)
        out["retrieval_mode"] = self.resolved_retrieval_mode
        return out


@dataclass
class EvalReport:
    kind: str
    config: dict
    provenance: dict
    classification: dict | None = None
    regions: dict | None = None
    ood_average: dict | None = None
    shared_unique: dict | None = None

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "config": self.config, "provenance": self.provenance}
        for name in ("classification", "regions", "ood_average", "shared_unique"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _dataset_for_modality(config: ExperimentConfig, corpus: SyntheticCorpus):
    """Units, features, labels, and unit->ad mapping for a modality.

    Text units are ads; vision and multimodal units are (ad, image)
    samples with the ad's text row reused across its samples.
    """
    labels = corpus.communities.labels
    if config.modality == "text":
        ids = list(corpus.text_emb.ids)
        x = corpus.text_emb.data
        y = np.array([labels[i] for i in ids], dtype=np.int64)
        return ids, x, y, {i: i for i in ids}
    sample_ids = [sample_id(s) for s in corpus.samples]
    ad_of = {sample_id(s): s.ad_id for s in corpus.samples}
    y = np.array([labels[s.ad_id] for s in corpus.samples], dtype=np.int64)
    if config.modality == "vision":
        return sample_ids, corpus.image_emb.select(sample_ids).data, y, ad_of
    text_by_ad = {i: r for i, r in zip(corpus.text_emb.ids, corpus.text_emb.data)}
    text_rows = np.vstack([text_by_ad[ad_of[sid]] for sid in sample_ids])
    text_m = EmbeddingMatrix(tuple(sample_ids), text_rows, normalized=True)
    image_m = corpus.image_emb.select(sample_ids)
    params = _fusion_params(config, text_m.dim)
    fused = fuse(text_m, image_m, strategy=config.fusion_strategy, params=params)
    return sample_ids, fused.data, y, ad_of


def _fusion_params(config: ExperimentConfig, dim: int):
    if config.fusion_strategy == "gated":
        return init_gated_params(dim, config.seed)
    if config.fusion_strategy == "attention":
        return init_attention_params(dim, config.seed)
    return None


def _split_units(
    config: ExperimentConfig, corpus: SyntheticCorpus, ids, ad_of
) -> tuple[list[int], list[int], list[int]]:
    """Index the units into train/val/test by their parent ad's split."""
    split = split_dataset(
        [ad.id for ad in corpus.ads], DEFAULT_SPLIT_RATIOS, seed=config.seed
    )
    bucket = {i: "train" for i in split.train_ids}
    bucket.update({i: "val" for i in split.val_ids})
    bucket.update({i: "test" for i in split.test_ids})
    out = {"train": [], "val": [], "test": []}
    for pos, unit in enumerate(ids):
        out[bucket[ad_of[unit]]].append(pos)
    return out["train"], out["val"], out["test"]


def _provenance(config: ExperimentConfig, corpora: Mapping[str, SyntheticCorpus]) -> dict:
    return {
        "package_version": __version__,
        "config_seed": config.seed,
        "regions": sorted(corpora),
    }


def run_identification(config: ExperimentConfig, corpus: SyntheticCorpus) -> EvalReport:
    """Closed-set vendor classification on the training region."""
    if corpus.communities.num_vendors < 2:
        raise DataError("identification needs at least 2 vendors")
    ids, x, y, ad_of = _dataset_for_modality(config, corpus)
    train_idx, val_idx, test_idx = _split_units(config, corpus, ids, ad_of)
    n_vendors = corpus.communities.num_vendors
    present = set(y[train_idx].tolist())
    missing = sorted(set(range(n_vendors)) - present)
    if missing:
        raise DataError(f"vendor {missing[0]} has no training samples (degenerate split)")
    params = init_head(x.shape[1], config.hidden_dim, n_vendors, config.seed)
    params, history = train_head(
        params,
        x[train_idx],
        y[train_idx],
        config.train,
        config.objective,
        x[val_idx] if val_idx else None,
        y[val_idx] if val_idx else None,
    )
    _, preds = predict(params, x[test_idx])
    report = classification_report(preds, y[test_idx])
    return EvalReport(
        kind="identification",
        config=config.echo(),
        provenance=_provenance(config, {corpus.region: corpus}),
        classification={
            "test": report,
            "selected_epoch": history.selected_epoch,
            "n_train": len(train_idx),
            "n_test": len(test_idx),
        },
    )


def _retrieval_run(
    docs: EmbeddingMatrix,
    queries: EmbeddingMatrix,
    doc_vendor: Mapping[str, int],
    query_vendor: Mapping[str, int],
    mrr_k: int = 10,
) -> RetrievalRun:
    """Search each query deep enough for MRR@k and R-Precision@X at once."""
    idx = build_index(docs)
    counts: dict[int, int] = {}
    for vendor in doc_vendor.values():
        counts[vendor] = counts.get(vendor, 0) + 1
    ks = [
        max(min(mrr_k, idx.size), min(counts.get(query_vendor[q], 0), idx.size), 1)
        for q in queries.ids
    ]
    hits = search(idx, queries, np.array(ks, dtype=np.int64))
    rankings = {
        qid: [doc for doc, _ in row] for qid, row in zip(queries.ids, hits)
    }
    return RetrievalRun(rankings=rankings, query_vendor=dict(query_vendor), doc_vendor=dict(doc_vendor))


def _region_metrics(run: RetrievalRun) -> dict[str, MetricReport]:
    return {
        "mrr@10": mrr_at_k(run, 10),
        "r_precision@x": r_precision_at_x(run, on_missing="zero"),
        "macro_f1@x": macro_f1_at_x(run, on_missing="zero"),
    }


def ood_average(reports: Sequence[MetricReport]) -> MetricReport:
    """Unweighted mean over regions; std propagated as the mean of stds."""
    reports = list(reports)
    if not reports:
        raise ValueError("ood_average needs at least one report")
    names = {r.metric for r in reports}
    if len(names) > 1:
        raise ValueError(f"cannot average different metrics: {sorted(names)}")
    flags = sorted({f for r in reports for f in r.flags})
    return MetricReport(
        metric=reports[0].metric,
        per_vendor={},
        mean=float(np.mean([r.mean for r in reports])),
        std=float(np.mean([r.std for r in reports])),
        support={},
        flags=flags,
    )


def shared_unique_breakdown(
    run: RetrievalRun, train_vendors: set[int], ood_vendors: set[int]
) -> dict[str, dict[str, MetricReport]]:
    """Score queries of vendors seen in training ("shared") separately from
    vendors unique to the OOD region."""
    if not train_vendors and not ood_vendors:
        raise ValueError("vendor sets are empty")
    partitions: dict[str, dict] = {"shared": {}, "unique": {}}
    for qid, ranked in run.rankings.items():
        side = "shared" if run.query_vendor[qid] in train_vendors else "unique"
        partitions[side][qid] = ranked
    out: dict[str, dict[str, MetricReport]] = {}
    for side, rankings in partitions.items():
        if not rankings:
            empty = MetricReport(
                metric="empty", per_vendor={}, mean=0.0, std=0.0,
                flags=[f"{side} partition is empty"],
            )
            out[side] = {
                "mrr@10": replace(empty, metric="mrr@10"),
                "r_precision@x": replace(empty, metric="r_precision@x"),
                "macro_f1@x": replace(empty, metric="macro_f1@x"),
            }
            continue
        sub = RetrievalRun(
            rankings=rankings,
            query_vendor={q: run.query_vendor[q] for q in rankings},
            doc_vendor=dict(run.doc_vendor),
        )
        out[side] = _region_metrics(sub)
    return out


def _shared_labels(
    corpus: SyntheticCorpus, train_identifiers: frozenset[str]
) -> set[int]:
    """Vendor labels in ``corpus`` whose community shares an identifier with
    the training region (the cross-region notion of "same vendor")."""
    shared: set[int] = set()
    for ad in corpus.ads:
        if ad.identifiers & train_identifiers:
            shared.add(corpus.communities.labels[ad.id])
    return shared


def run_verification_retrieval(
    config: ExperimentConfig, corpora: Mapping[str, SyntheticCorpus]
) -> EvalReport:
    """Open-set retrieval: train on the training region, evaluate retrieval
    on it and on every configured OOD region, then average the OOD scores."""
    if config.train_region not in corpora:
        raise DataError(f"missing training region {config.train_region!r}")
    for region in config.eval_regions:
        if region not in corpora:
            raise DataError(f"missing eval region {region!r}")
        if corpora[region].communities.num_vendors < 2:
            raise DataError(f"region {region!r} has fewer than 2 vendors")
    train_corpus = corpora[config.train_region]
    if train_corpus.communities.num_vendors < 2:
        raise DataError(f"region {config.train_region!r} has fewer than 2 vendors")

    params: HeadParams | None = None
    if config.objective != "passthrough":
        ids, x, y, ad_of = _dataset_for_modality(config, train_corpus)
        train_idx, val_idx, _ = _split_units(config, train_corpus, ids, ad_of)
        usable = set(range(train_corpus.communities.num_vendors)) & set(y[train_idx].tolist())
        if len(usable) < 2:
            raise DataError("degenerate split: fewer than 2 vendors in training data")
        params = init_head(
            x.shape[1], config.hidden_dim, train_corpus.communities.num_vendors, config.seed
        )
        params, _ = train_head(
            params,
            x[train_idx],
            y[train_idx],
            config.train,
            config.objective,
            x[val_idx] if val_idx else None,
            y[val_idx] if val_idx else None,
        )

    regions_out: dict[str, dict] = {}
    ood_reports: dict[str, dict[str, MetricReport]] = {}
    shared_unique: dict[str, dict] = {}
    train_identifiers = train_corpus.identifier_set
    for region in (config.train_region, *config.eval_regions):
        corpus = corpora[region]
        ids, x, y, ad_of = _dataset_for_modality(config, corpus)
        train_idx, _, test_idx = _split_units(config, corpus, ids, ad_of)
        if not train_idx or not test_idx:
            raise DataError(f"region {region!r} split produced an empty side")
        feats = encode(params, x) if params is not None else None
        data = feats if feats is not None else x
        docs = EmbeddingMatrix(
            ids=tuple(ids[i] for i in train_idx), data=data[train_idx]
        )
        queries = EmbeddingMatrix(
            ids=tuple(ids[i] for i in test_idx), data=data[test_idx]
        )
        docs = normalized_matrix(docs)
        queries = normalized_matrix(queries)
        doc_vendor = {ids[i]: int(y[i]) for i in train_idx}
        query_vendor = {ids[i]: int(y[i]) for i in test_idx}
        run = _retrieval_run(docs, queries, doc_vendor, query_vendor)
        reports = _region_metrics(run)
        regions_out[region] = {name: r.to_dict() for name, r in reports.items()}
        if region != config.train_region:
            ood_reports[region] = reports
            shared = _shared_labels(corpus, train_identifiers)
            all_labels = set(corpus.communities.members)
            breakdown = shared_unique_breakdown(run, shared, all_labels - shared)
            shared_unique[region] = {
                side: {name: r.to_dict() for name, r in result.items()}
                for side, result in breakdown.items()
            }

    ood_avg = None
    if ood_reports:
        ood_avg = {
            name: ood_average([ood_reports[r][name] for r in ood_reports]).to_dict()
            for name in ("mrr@10", "r_precision@x", "macro_f1@x")
        }
    return EvalReport(
        kind="verification_retrieval",
        config=config.echo(),
        provenance=_provenance(config, corpora),
        regions=regions_out,
        ood_average=ood_avg,
        shared_unique=shared_unique or None,
    )
