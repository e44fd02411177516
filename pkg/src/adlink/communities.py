"""Vendor ground truth: connected components over ads sharing identifiers.

Two ads belong to the same vendor community when they are linked by a chain
of shared phone identifiers. Labels are dense integers assigned in order of
each community's smallest member ad id, so repeated runs agree bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

from .records import MaskedAd
from .validation import DataError


class _UnionFind:
    """Union-find with path compression and union by rank."""

    def __init__(self):
        self.parent: dict[str, str] = {}
        self.rank: dict[str, int] = {}

    def add(self, item: str) -> None:
        if item not in self.parent:
            self.parent[item] = item
            self.rank[item] = 0

    def find(self, item: str) -> str:
        root = item
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[item] != root:
            self.parent[item], item = root, self.parent[item]
        return root

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


@dataclass(frozen=True)
class VendorCommunities:
    labels: Mapping[str, int]
    members: Mapping[int, frozenset[str]]

    @property
    def num_vendors(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[str]:
        return iter(self.labels)


def _relabel(groups: list[frozenset[str]]) -> VendorCommunities:
    groups = sorted(groups, key=min)
    labels: dict[str, int] = {}
    members: dict[int, frozenset[str]] = {}
    for label, group in enumerate(groups):
        members[label] = group
        for ad_id in group:
            labels[ad_id] = label
    return VendorCommunities(labels=labels, members=members)


def build_communities(ads: Sequence[MaskedAd]) -> VendorCommunities:
    """Group ads into vendor communities via shared identifiers."""
    uf = _UnionFind()
    anchor: dict[str, str] = {}  # identifier -> first ad carrying it
    seen: set[str] = set()
    for ad in ads:
        if ad.id in seen:
            raise DataError(f"duplicate ad id {ad.id!r}")
        seen.add(ad.id)
        if not ad.identifiers:
            raise DataError(f"ad {ad.id!r} has no identifiers; cannot assign a vendor")
        uf.add(ad.id)
        for ident in ad.identifiers:
            if ident in anchor:
                uf.union(anchor[ident], ad.id)
            else:
                anchor[ident] = ad.id
    roots: dict[str, set[str]] = {}
    for ad in ads:
        roots.setdefault(uf.find(ad.id), set()).add(ad.id)
    return _relabel([frozenset(g) for g in roots.values()])


def filter_min_ads(communities: VendorCommunities, min_count: int) -> VendorCommunities:
    """Drop communities with fewer than ``min_count`` ads and relabel densely."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    kept = [g for g in communities.members.values() if len(g) >= min_count]
    return _relabel(list(kept))


def community_identifiers(
    communities: VendorCommunities, ads: Sequence[MaskedAd]
) -> dict[int, frozenset[str]]:
    """Identifier set per vendor label, for cross-corpus vendor matching."""
    by_label: dict[int, set[str]] = {label: set() for label in communities.members}
    for ad in ads:
        label = communities.labels.get(ad.id)
        if label is not None:
            by_label[label].update(ad.identifiers)
    return {label: frozenset(s) for label, s in by_label.items()}


def write_labels_csv(communities: VendorCommunities, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["ad_id", "vendor_label"])
    for ad_id in sorted(communities.labels):
        writer.writerow([ad_id, communities.labels[ad_id]])


def read_labels_csv(fh) -> VendorCommunities:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header != ["ad_id", "vendor_label"]:
        raise DataError(f"bad labels header {header!r}, expected ['ad_id', 'vendor_label']")
    labels: dict[str, int] = {}
    members: dict[int, set[str]] = {}
    for row in reader:
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"bad labels row {row!r}")
        ad_id, raw = row
        if ad_id in labels:
            raise DataError(f"duplicate ad id {ad_id!r} in labels file")
        try:
            label = int(raw)
        except ValueError as exc:
            raise DataError(f"non-integer vendor label {raw!r}") from exc
        labels[ad_id] = label
        members.setdefault(label, set()).add(ad_id)
    expected = set(range(len(members)))
    if set(members) != expected:
        raise DataError("vendor labels are not dense integers starting at 0")
    return VendorCommunities(
        labels=labels, members={k: frozenset(v) for k, v in members.items()}
    )
