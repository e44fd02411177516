"""Vendor community construction against a brute-force BFS oracle."""

import io

import numpy as np
import pytest

from adlink.communities import (
    build_communities,
    community_identifiers,
    filter_min_ads,
    read_labels_csv,
    write_labels_csv,
)
from adlink.records import MaskedAd
from adlink.validation import DataError


def _ad(ad_id, *phones):
    return MaskedAd(ad_id, "South", "a [SEP] b", frozenset(phones), ("i1",))


def bfs_components(ads):
    """Independent oracle: BFS over the ad-identifier bipartite graph."""
    by_phone = {}
    for ad in ads:
        for p in ad.identifiers:
            by_phone.setdefault(p, []).append(ad.id)
    neighbors = {ad.id: set() for ad in ads}
    for members in by_phone.values():
        for a in members:
            neighbors[a].update(members)
    seen = set()
    components = []
    for ad in ads:
        if ad.id in seen:
            continue
        queue, comp = [ad.id], set()
        while queue:
            cur = queue.pop()
            if cur in comp:
                continue
            comp.add(cur)
            queue.extend(neighbors[cur] - comp)
        seen |= comp
        components.append(frozenset(comp))
    return set(components)


class TestBuildCommunities:
    def test_chain_merges(self):
        ads = [_ad("A", "p1"), _ad("B", "p1", "p2"), _ad("C", "p2")]
        comms = build_communities(ads)
        assert comms.num_vendors == 1
        assert set(comms.members[0]) == {"A", "B", "C"}

    def test_disjoint_identifiers(self):
        comms = build_communities([_ad("A", "p1"), _ad("B", "p2")])
        assert comms.num_vendors == 2
        assert comms.labels["A"] != comms.labels["B"]

    def test_single_ad(self):
        comms = build_communities([_ad("A", "p1")])
        assert comms.num_vendors == 1
        assert comms.labels == {"A": 0}

    def test_empty_identifiers_rejected(self):
        with pytest.raises(DataError, match="'B'"):
            build_communities([_ad("A", "p1"), _ad("B")])

    def test_duplicate_ad_rejected(self):
        with pytest.raises(DataError, match="duplicate"):
            build_communities([_ad("A", "p1"), _ad("A", "p2")])

    def test_labels_ordered_by_smallest_member(self):
        ads = [_ad("z9", "p1"), _ad("a1", "p2"), _ad("m5", "p2")]
        comms = build_communities(ads)
        assert comms.labels["a1"] == 0
        assert comms.labels["m5"] == 0
        assert comms.labels["z9"] == 1

    def test_matches_bfs_oracle_on_random_graphs(self):
        rng = np.random.default_rng(2024)
        for _ in range(150):
            n_ads = int(rng.integers(1, 60))
            n_phones = int(rng.integers(1, 25))
            ads = []
            for i in range(n_ads):
                count = int(rng.integers(1, 4))
                phones = rng.choice(n_phones, size=min(count, n_phones), replace=False)
                ads.append(_ad(f"ad{i:03d}", *(f"p{p}" for p in phones)))
            comms = build_communities(ads)
            assert set(comms.members.values()) == bfs_components(ads)

    def test_deterministic_across_runs(self):
        rng = np.random.default_rng(7)
        ads = [
            _ad(f"ad{i}", *(f"p{int(p)}" for p in rng.choice(10, size=2, replace=False)))
            for i in range(30)
        ]
        first = build_communities(ads)
        second = build_communities(list(ads))
        assert first.labels == second.labels
        assert first.members == second.members

    def test_input_order_irrelevant(self):
        ads = [_ad("A", "p1"), _ad("B", "p1", "p2"), _ad("C", "p3")]
        assert build_communities(ads).labels == build_communities(ads[::-1]).labels

    def test_adding_identifier_only_merges(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            ads = [
                _ad(f"ad{i}", f"p{int(rng.integers(0, 8))}")
                for i in range(12)
            ]
            before = build_communities(ads)
            target = ads[int(rng.integers(0, len(ads)))]
            extended = [
                MaskedAd(a.id, a.region, a.text,
                         a.identifiers | {f"p{int(rng.integers(0, 8))}"} if a is target else a.identifiers,
                         a.image_refs)
                for a in ads
            ]
            after = build_communities(extended)
            # every original community stays within one new community
            for group in before.members.values():
                assert len({after.labels[i] for i in group}) == 1


class TestFilterMinAds:
    def _communities(self):
        ads = (
            [_ad("a1", "p1")]
            + [_ad(f"b{i}", "p2") for i in range(2)]
            + [_ad(f"c{i}", "p3") for i in range(5)]
        )
        return build_communities(ads)

    def test_min_one_is_identity(self):
        comms = self._communities()
        assert filter_min_ads(comms, 1).members == comms.members

    def test_threshold_drops_small(self):
        kept = filter_min_ads(self._communities(), 2)
        sizes = sorted(len(g) for g in kept.members.values())
        assert sizes == [2, 5]

    def test_relabel_dense(self):
        kept = filter_min_ads(self._communities(), 2)
        assert sorted(kept.members) == list(range(kept.num_vendors))

    def test_invalid_min_count(self):
        with pytest.raises(ValueError):
            filter_min_ads(self._communities(), 0)


class TestLabelsCsv:
    def test_roundtrip(self):
        comms = build_communities([_ad("A", "p1"), _ad("B", "p1"), _ad("C", "p2")])
        buf = io.StringIO()
        write_labels_csv(comms, buf)
        loaded = read_labels_csv(io.StringIO(buf.getvalue()))
        assert loaded.labels == comms.labels

    def test_bad_header(self):
        with pytest.raises(DataError, match="header"):
            read_labels_csv(io.StringIO("foo,bar\n"))

    def test_non_dense_labels_rejected(self):
        with pytest.raises(DataError, match="dense"):
            read_labels_csv(io.StringIO("ad_id,vendor_label\nA,0\nB,2\n"))


def test_community_identifiers():
    ads = [_ad("A", "p1", "p2"), _ad("B", "p2"), _ad("C", "p3")]
    comms = build_communities(ads)
    idents = community_identifiers(comms, ads)
    assert idents[comms.labels["A"]] == frozenset({"p1", "p2"})
    assert idents[comms.labels["C"]] == frozenset({"p3"})
