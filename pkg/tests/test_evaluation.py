"""Synthetic generator and experiment orchestration."""

from dataclasses import replace

import numpy as np
import pytest

from adlink.embedder import hash_embed_text
from adlink.evaluation import (
    EvalReport,
    ExperimentConfig,
    SyntheticSpec,
    generate_synthetic,
    make_regional_corpora,
    ood_average,
    run_identification,
    run_verification_retrieval,
    shared_unique_breakdown,
)
from adlink.head import TrainConfig
from adlink.metrics import MetricReport, RetrievalRun, mrr_at_k, r_precision_at_x, macro_f1_at_x
from adlink.records import is_masked_clean
from adlink.validation import DataError

FAST = TrainConfig(max_epochs=15, patience=0, batch_size=16)


def small_spec(**kwargs):
    base = dict(vendors=6, ads_per_vendor=4, images_per_ad=2, seed=5)
    base.update(kwargs)
    return SyntheticSpec(**base)


class TestGenerateSynthetic:
    def test_counts(self):
        spec = SyntheticSpec(vendors=40, ads_per_vendor=10, images_per_ad=5)
        corpus = generate_synthetic(spec)
        assert len(corpus.ads) == 400
        assert len(corpus.samples) == 2000
        assert corpus.communities.num_vendors == 40

    def test_deterministic(self):
        a = generate_synthetic(small_spec())
        b = generate_synthetic(small_spec())
        assert a.ads == b.ads
        assert np.array_equal(a.text_emb.data, b.text_emb.data)
        assert np.array_equal(a.image_emb.data, b.image_emb.data)

    def test_rho_one_recoverable_by_nearest_centroid(self):
        spec = small_spec(vendors=8, ads_per_vendor=5, images_per_ad=3, rho=1.0,
                          nuisance_scale=0.0)
        corpus = generate_synthetic(spec)
        y = np.array([corpus.communities.labels[s.ad_id] for s in corpus.samples])
        x = corpus.image_emb.data
        centroids = np.vstack([x[y == v].mean(axis=0) for v in range(8)])
        centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
        assert np.array_equal(np.argmax(x @ centroids.T, axis=1), y)

    def test_texts_are_masked_clean(self):
        corpus = generate_synthetic(small_spec())
        for ad in corpus.ads:
            assert ad.text.count("[SEP]") == 1
            assert is_masked_clean(ad.text)
            assert all(p.isdigit() and 10 <= len(p) <= 15 for p in ad.identifiers)

    def test_unit_rows(self):
        corpus = generate_synthetic(small_spec())
        for m in (corpus.text_emb, corpus.image_emb):
            assert np.allclose(np.linalg.norm(m.data, axis=1), 1.0, atol=1e-9)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(vendors=1)
        with pytest.raises(ValueError):
            SyntheticSpec(rho=1.5)
        with pytest.raises(ValueError):
            SyntheticSpec(ads_per_vendor=1)


class TestMakeRegionalCorpora:
    def test_shared_vendors_link_by_phone(self):
        corpora = make_regional_corpora(small_spec(), ["South", "Midwest"], shared_fraction=0.5)
        south = corpora["South"].identifier_set
        midwest = corpora["Midwest"].identifier_set
        assert len(south & midwest) == 3  # half of 6 vendors shared

    def test_all_regions_present(self):
        corpora = make_regional_corpora(small_spec(), ["South", "West", "Northeast"])
        assert set(corpora) == {"South", "West", "Northeast"}

    def test_zero_shared(self):
        corpora = make_regional_corpora(small_spec(), ["South", "West"], shared_fraction=0.0)
        assert not corpora["South"].identifier_set & corpora["West"].identifier_set


class TestRunIdentification:
    def test_reproducible(self):
        corpus = generate_synthetic(small_spec())
        config = ExperimentConfig(modality="text", objective="ce", train=FAST, hidden_dim=8)
        a = run_identification(config, corpus)
        b = run_identification(config, corpus)
        assert a.to_json() == b.to_json()

    def test_report_has_classification_metrics(self):
        corpus = generate_synthetic(small_spec())
        config = ExperimentConfig(modality="text", objective="ce", train=FAST, hidden_dim=8)
        report = run_identification(config, corpus)
        test_metrics = report.classification["test"]
        assert set(test_metrics) == {
            "accuracy", "balanced_accuracy", "micro_f1", "weighted_f1", "macro_f1"
        }

    def test_degenerate_split_rejected(self):
        corpus = generate_synthetic(small_spec(vendors=8, ads_per_vendor=2))
        hit = None
        for seed in range(400):
            config = ExperimentConfig(
                modality="text", objective="ce", train=FAST, hidden_dim=8, seed=seed
            )
            try:
                run_identification(config, corpus)
            except DataError as exc:
                assert "degenerate" in str(exc)
                hit = seed
                break
        assert hit is not None, "no seed produced a vendor-free training split"

    def test_vision_modality_runs(self):
        corpus = generate_synthetic(small_spec())
        config = ExperimentConfig(modality="vision", objective="ce", train=FAST, hidden_dim=8)
        report = run_identification(config, corpus)
        assert report.classification["n_train"] > 0

    def test_three_cluster_ce_reaches_high_f1(self):
        spec = SyntheticSpec(
            vendors=3, ads_per_vendor=40, images_per_ad=2, seed=1,
            twin_separation=2.0, nuisance_scale=0.0,
        )
        corpus = generate_synthetic(spec)
        config = ExperimentConfig(
            modality="text", objective="ce", hidden_dim=16, seed=1111,
            train=TrainConfig(max_epochs=100, patience=0, batch_size=16),
        )
        report = run_identification(config, corpus)
        assert report.classification["test"]["macro_f1"] >= 0.95


class TestOodAverage:
    def _report(self, mean, std):
        return MetricReport("mrr@10", {0: mean}, mean, std)

    def test_identical_reports(self):
        r = self._report(0.5, 0.1)
        out = ood_average([r, r, r])
        assert out.mean == pytest.approx(0.5, abs=1e-15)
        assert out.std == pytest.approx(0.1, abs=1e-15)

    def test_mean_of_means(self):
        out = ood_average([self._report(m, 0.0) for m in (0.2, 0.4, 0.6)])
        assert out.mean == pytest.approx(0.4)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            ood_average([])

    def test_mixed_metrics_rejected(self):
        a = MetricReport("mrr@10", {}, 0.5, 0.0)
        b = MetricReport("macro_f1@x", {}, 0.5, 0.0)
        with pytest.raises(ValueError, match="different metrics"):
            ood_average([a, b])


class TestSharedUniqueBreakdown:
    def _run(self):
        doc_vendor = {"d0": 0, "d1": 0, "d2": 1, "d3": 1, "d4": 2}
        rankings = {
            "q0": ["d0", "d1", "d2", "d3", "d4"],
            "q1": ["d2", "d3", "d0", "d1", "d4"],
            "q2": ["d4", "d0", "d1", "d2", "d3"],
        }
        return RetrievalRun(rankings, {"q0": 0, "q1": 1, "q2": 2}, doc_vendor)

    def test_partition_is_exhaustive(self):
        run = self._run()
        out = shared_unique_breakdown(run, train_vendors={0, 2}, ood_vendors={1})
        shared_n = sum(out["shared"]["mrr@10"].support.values())
        unique_n = sum(out["unique"]["mrr@10"].support.values())
        assert shared_n + unique_n == len(run.rankings)

    def test_vendor_in_train_goes_shared(self):
        out = shared_unique_breakdown(self._run(), {0, 2}, {1})
        assert set(out["shared"]["mrr@10"].per_vendor) == {0, 2}
        assert set(out["unique"]["mrr@10"].per_vendor) == {1}

    def test_empty_partition_flagged(self):
        out = shared_unique_breakdown(self._run(), {0, 1, 2}, set())
        assert out["unique"]["mrr@10"].flags
        assert out["unique"]["mrr@10"].per_vendor == {}

    def test_empty_sets_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            shared_unique_breakdown(self._run(), set(), set())


class TestRunVerificationRetrieval:
    def test_regions_and_ood_average(self):
        corpora = make_regional_corpora(small_spec(), ["South", "Midwest", "West"])
        config = ExperimentConfig(
            modality="text", objective="ce", train=FAST, hidden_dim=8,
            eval_regions=("Midwest", "West"),
        )
        report = run_verification_retrieval(config, corpora)
        assert set(report.regions) == {"South", "Midwest", "West"}
        for metric in ("mrr@10", "r_precision@x", "macro_f1@x"):
            got = report.ood_average[metric]["mean"]
            means = [report.regions[r][metric]["mean"] for r in ("Midwest", "West")]
            assert got == pytest.approx(float(np.mean(means)))
        assert set(report.shared_unique) == {"Midwest", "West"}

    def test_injected_duplicate_query_gets_rr_one(self):
        corpus = generate_synthetic(small_spec())
        config = ExperimentConfig(modality="text", objective="passthrough")
        report = run_verification_retrieval(config, {"South": corpus})
        assert report.regions["South"]["mrr@10"]["mean"] > 0

    def test_missing_region_rejected(self):
        corpus = generate_synthetic(small_spec())
        config = ExperimentConfig(modality="text", eval_regions=("Nowhere",), train=FAST)
        with pytest.raises(DataError, match="Nowhere"):
            run_verification_retrieval(config, {"South": corpus})

    def test_byte_identical_reports(self):
        corpora = make_regional_corpora(small_spec(), ["South", "Midwest"])
        config = ExperimentConfig(
            modality="multimodal", objective="ce_supcon", train=FAST, hidden_dim=8,
            eval_regions=("Midwest",), fusion_strategy="mean",
        )
        a = run_verification_retrieval(config, corpora)
        b = run_verification_retrieval(config, corpora)
        assert a.to_json() == b.to_json()

    def test_passthrough_equals_direct_computation(self):
        """Pipeline transparency: untrained pass-through on hash embeddings
        must equal metrics computed directly on those embeddings."""
        corpus = generate_synthetic(small_spec())
        hashed = hash_embed_text(
            [ad.text for ad in corpus.ads],
            ids=[ad.id for ad in corpus.ads],
        )
        corpus = replace(corpus, text_emb=hashed)
        config = ExperimentConfig(modality="text", objective="passthrough", seed=1111)
        report = run_verification_retrieval(config, {"South": corpus})

        # independent path: split, rank by cosine with a full sort, score
        from adlink.records import split_dataset

        split = split_dataset([ad.id for ad in corpus.ads], seed=config.seed)
        labels = corpus.communities.labels
        pos = {i: k for k, i in enumerate(hashed.ids)}
        docs = list(split.train_ids)
        queries = list(split.test_ids)
        doc_vendor = {i: labels[i] for i in docs}
        query_vendor = {i: labels[i] for i in queries}
        doc_mat = hashed.data[[pos[i] for i in docs]]
        rankings = {}
        counts = {}
        for v in doc_vendor.values():
            counts[v] = counts.get(v, 0) + 1
        for q in queries:
            scores = doc_mat @ hashed.data[pos[q]]
            order = sorted(range(len(docs)), key=lambda j: (-scores[j], docs[j]))
            depth = max(min(10, len(docs)), counts.get(query_vendor[q], 0))
            rankings[q] = [docs[j] for j in order[:depth]]
        run = RetrievalRun(rankings, query_vendor, doc_vendor)
        assert report.regions["South"]["mrr@10"]["mean"] == pytest.approx(
            mrr_at_k(run, 10).mean, abs=1e-12
        )
        assert report.regions["South"]["r_precision@x"]["mean"] == pytest.approx(
            r_precision_at_x(run, on_missing="zero").mean, abs=1e-12
        )
        assert report.regions["South"]["macro_f1@x"]["mean"] == pytest.approx(
            macro_f1_at_x(run, on_missing="zero").mean, abs=1e-12
        )

    def test_config_validation(self):
        with pytest.raises(ValueError, match="modality"):
            ExperimentConfig(modality="audio")
        with pytest.raises(ValueError, match="retrieval mode"):
            ExperimentConfig(retrieval_mode="x2x")
