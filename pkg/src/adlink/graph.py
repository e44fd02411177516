"""Investigation knowledge graphs around a query ad.

A graph is a star of query-to-retrieved edges weighted by cosine
similarity, plus retrieved-to-retrieved edges whose pairwise similarity
clears a threshold. Exports (DOT and JSON) are byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
import numpy as np

from .index import FlatIndex, search
from .validation import as_float64_2d

GRAPH_MODES = ("r_precision", "mrr_k")
DEFAULT_THETA = 0.5


@dataclass
class KnowledgeGraph:
    nodes: list[tuple[str, str]]  # (ad_id, role), query node first
    edges: list[tuple[str, str, float]]
    metadata: dict = field(default_factory=dict)

    @property
    def query_id(self) -> str:
        return self.nodes[0][0]


def build_graph(
    idx: FlatIndex,
    query: tuple[str, np.ndarray],
    mode: str = "mrr_k",
    k_or_x: int = 10,
    theta: float = DEFAULT_THETA,
) -> KnowledgeGraph:
    """Retrieve the cutoff neighborhood of a query ad and wire it up.

    ``mode`` records whether the cutoff is the vendor's relevant count
    (``r_precision``) or a top-K window (``mrr_k``); retrieval itself is
    identical. A document sharing the query's id is skipped so the graph
    never contains self-loops.
    """
    if mode not in GRAPH_MODES:
        raise ValueError(f"unknown graph mode {mode!r}")
    if k_or_x < 0:
        raise ValueError(f"cutoff must be >= 0, got {k_or_x}")
    if k_or_x > idx.size:
        raise ValueError(f"cutoff {k_or_x} exceeds index size {idx.size}")
    query_id, vec = query
    metadata = {"mode": mode, "cutoff": k_or_x, "theta": theta}
    nodes: list[tuple[str, str]] = [(query_id, "query")]
    if k_or_x == 0:
        return KnowledgeGraph(nodes=nodes, edges=[], metadata=metadata)
    vec = as_float64_2d(vec, "query embedding")
    k = min(k_or_x + (1 if query_id in idx.doc_ids else 0), idx.size)
    hits = [(doc, score) for doc, score in search(idx, vec, k)[0] if doc != query_id]
    hits = hits[:k_or_x]
    retrieved = sorted(doc for doc, _ in hits)
    nodes.extend((doc, "retrieved") for doc in retrieved)
    edges = [(query_id, doc, score) for doc, score in sorted(hits)]
    pos = {doc: idx.doc_ids.index(doc) for doc in retrieved}
    for i, a in enumerate(retrieved):
        for b in retrieved[i + 1 :]:
            w = float(idx.matrix[pos[a]] @ idx.matrix[pos[b]])
            if w >= theta:
                edges.append((a, b, w))
    return KnowledgeGraph(nodes=nodes, edges=edges, metadata=metadata)


def _sorted_edges(g: KnowledgeGraph) -> list[tuple[str, str, float]]:
    query = g.query_id
    star = sorted(e for e in g.edges if e[0] == query)
    pairwise = sorted(e for e in g.edges if e[0] != query)
    return star + pairwise


def export_graph(g: KnowledgeGraph, format: str = "dot") -> str:
    if format == "dot":
        return _export_dot(g)
    if format == "json":
        return _export_json(g)
    raise ValueError(f"unknown export format {format!r}")


def _export_dot(g: KnowledgeGraph) -> str:
    lines = ["graph knowledge_graph {"]
    query = g.query_id
    lines.append(f'  "{query}" [color=red, fontcolor=red, shape=box, role="query"];')
    for node_id, _ in sorted(n for n in g.nodes if n[1] != "query"):
        lines.append(f'  "{node_id}" [role="retrieved"];')
    for a, b, w in _sorted_edges(g):
        lines.append(f'  "{a}" -- "{b}" [label="{w:.4f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _export_json(g: KnowledgeGraph) -> str:
    payload = {
        "nodes": [{"id": i, "role": r} for i, r in g.nodes],
        "edges": [{"a": a, "b": b, "w": w} for a, b, w in _sorted_edges(g)],
        "metadata": g.metadata,
    }
    return json.dumps(payload, sort_keys=True) + "\n"


def graph_from_json(text: str) -> KnowledgeGraph:
    payload = json.loads(text)
    nodes = [(str(n["id"]), str(n["role"])) for n in payload["nodes"]]
    if sum(1 for _, role in nodes if role == "query") != 1:
        raise ValueError("graph must contain exactly one query node")
    nodes.sort(key=lambda n: (n[1] != "query", n[0]))
    edges = [(str(e["a"]), str(e["b"]), float(e["w"])) for e in payload["edges"]]
    return KnowledgeGraph(nodes=nodes, edges=edges, metadata=dict(payload["metadata"]))
