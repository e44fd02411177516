"""Command-line surface for the pipeline.

Exit codes: 0 success, 1 usage error, 2 data error. Outputs are written to
a temporary file and atomically renamed, so failures never leave partial
files behind. Every subcommand accepts ``--config`` (flat JSON key/value
file, keys named like the long flags with dashes replaced by underscores)
and ``--seed``; explicit flags win over config values.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import tempfile
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .communities import build_communities, filter_min_ads, read_labels_csv, write_labels_csv
from .embedder import (
    HashEmbedConfig,
    hash_embed_text,
    load_embeddings,
    normalized_matrix,
    save_embeddings,
    sidecar_checksum_ok,
)
from .evaluation import (
    ExperimentConfig,
    SyntheticSpec,
    SyntheticCorpus,
    generate_synthetic,
    make_regional_corpora,
    run_identification,
    run_verification_retrieval,
)
from .graph import build_graph, export_graph
from .head import TrainConfig, init_head, save_checkpoint, train_head
from .index import build_index, search
from .objectives import (
    Batch,
    LossWeights,
    ce_loss,
    grad_check,
    mined_triplet_loss,
    ntxent_itc_loss,
    supcon_loss,
)
from .records import (
    build_masked_ads,
    expand_samples,
    parse_ads,
    read_masked_corpus,
    split_dataset,
    write_masked_corpus,
)
from .validation import DataError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@contextlib.contextmanager
def _atomic_path(path: str):
    """Yield a temp path in the target directory; rename into place on
    success, remove on failure."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-adlink-")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.remove(tmp)
        raise


def _atomic_write_text(path: str, text: str) -> None:
    with _atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid config {path}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise DataError(f"config {path} must hold a JSON object")
    return cfg


def _resolve(args, config: dict, name: str, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _open_input(path: str):
    try:
        return open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc


def _train_config(args, config: dict) -> TrainConfig:
    base = TrainConfig()
    weights = LossWeights(
        w_ce=float(_resolve(args, config, "w_ce", 1.0)),
        w_supcon=float(_resolve(args, config, "w_supcon", 1.0)),
        w_triplet=float(_resolve(args, config, "w_triplet", 1.0)),
        w_itc=float(_resolve(args, config, "w_itc", 1.0)),
    )
    return replace(
        base,
        lr=float(_resolve(args, config, "lr", base.lr)),
        weight_decay=float(_resolve(args, config, "weight_decay", base.weight_decay)),
        warmup_steps=int(_resolve(args, config, "warmup_steps", base.warmup_steps)),
        batch_size=int(_resolve(args, config, "batch_size", base.batch_size)),
        temperature=float(_resolve(args, config, "temperature", base.temperature)),
        triplet_margin=float(_resolve(args, config, "triplet_margin", base.triplet_margin)),
        in_batch_negatives=int(
            _resolve(args, config, "in_batch_negatives", base.in_batch_negatives)
        ),
        max_epochs=int(_resolve(args, config, "max_epochs", base.max_epochs)),
        patience=int(_resolve(args, config, "patience", base.patience)),
        seed=int(_resolve(args, config, "seed", base.seed)),
        loss_weights=weights,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_ingest(args, config) -> int:
    fmt = _resolve(args, config, "format", "jsonl")
    with _open_input(args.input) as fh:
        ads = parse_ads(fh, format=fmt)
    masked = build_masked_ads(ads)
    with _atomic_path(args.output) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            write_masked_corpus(masked, fh)
    if args.json:
        print(json.dumps({"ads": len(masked), "output": args.output}, sort_keys=True))
    else:
        print(f"ingested {len(masked)} ads -> {args.output}")
    return EXIT_OK


def _cmd_communities(args, config) -> int:
    min_ads = int(_resolve(args, config, "min_ads", 1))
    with _open_input(args.input) as fh:
        ads = read_masked_corpus(fh)
    comms = filter_min_ads(build_communities(ads), min_ads)
    with _atomic_path(args.output) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            write_labels_csv(comms, fh)
    payload = {
        "ads": len(comms.labels),
        "vendors": comms.num_vendors,
        "output": args.output,
    }
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(f"{payload['vendors']} vendor communities over {payload['ads']} ads -> {args.output}")
    return EXIT_OK


def _cmd_embed(args, config) -> int:
    binary = bool(_resolve(args, config, "binary", False))
    expect_dim = _resolve(args, config, "expect_dim", None)
    if args.import_path:
        matrix = load_embeddings(
            args.import_path, expect_dim=int(expect_dim) if expect_dim else None
        )
    else:
        if not args.input:
            raise DataError("embed needs --input (masked corpus) or --import")
        with _open_input(args.input) as fh:
            ads = read_masked_corpus(fh)
        cfg = HashEmbedConfig(
            dim=int(_resolve(args, config, "dim", 256)),
            ngram_min=int(_resolve(args, config, "ngram_min", 3)),
            ngram_max=int(_resolve(args, config, "ngram_max", 5)),
            seed=int(_resolve(args, config, "seed", 0)),
        )
        matrix = hash_embed_text([ad.text for ad in ads], cfg, ids=[ad.id for ad in ads])
    with _atomic_path(args.output) as tmp:
        save_embeddings(matrix, tmp, binary=binary)
    if args.json:
        print(json.dumps({"rows": len(matrix), "dim": matrix.dim, "output": args.output}, sort_keys=True))
    else:
        print(f"embedded {len(matrix)} rows (D={matrix.dim}) -> {args.output}")
    return EXIT_OK


def _cmd_train(args, config) -> int:
    matrix = load_embeddings(args.embeddings)
    with _open_input(args.labels) as fh:
        comms = read_labels_csv(fh)
    missing = [i for i in matrix.ids if i not in comms.labels]
    if missing:
        raise DataError(f"no vendor label for id {missing[0]!r}")
    y = np.array([comms.labels[i] for i in matrix.ids], dtype=np.int64)
    tc = _train_config(args, config)
    objective = _resolve(args, config, "objective", "ce_supcon")
    hidden_dim = int(_resolve(args, config, "hidden_dim", 32))
    activation = _resolve(args, config, "activation", "none")
    split = split_dataset(matrix.ids, seed=tc.seed)
    pos = {ad_id: k for k, ad_id in enumerate(matrix.ids)}
    train_idx = [pos[i] for i in split.train_ids]
    val_idx = [pos[i] for i in split.val_ids]
    n_vendors = comms.num_vendors
    params = init_head(matrix.dim, hidden_dim, n_vendors, tc.seed, activation=activation)
    params, history = train_head(
        params,
        matrix.data[train_idx],
        y[train_idx],
        tc,
        objective,
        matrix.data[val_idx] if val_idx else None,
        y[val_idx] if val_idx else None,
    )
    with _atomic_path(args.output) as tmp:
        save_checkpoint(params, tmp)
    if args.history:
        _atomic_write_text(
            args.history, json.dumps(history.to_dict(), sort_keys=True, indent=2) + "\n"
        )
    summary = {
        "selected_epoch": history.selected_epoch,
        "epochs_run": len(history.epochs),
        "best_val_macro_f1": max((e.val_macro_f1 for e in history.epochs), default=0.0),
        "checkpoint": args.output,
    }
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(
            f"trained {objective} head: best epoch {summary['selected_epoch']} "
            f"(val macro-F1 {summary['best_val_macro_f1']:.4f}) -> {args.output}"
        )
    return EXIT_OK


def _read_corpus_dir(directory: str) -> tuple[dict, dict[str, SyntheticCorpus]]:
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {manifest_path}: {exc.strerror}") from exc
    corpora: dict[str, SyntheticCorpus] = {}
    for region in manifest["regions"]:
        tag = region.lower()
        with _open_input(os.path.join(directory, f"{tag}.masked.jsonl")) as fh:
            ads = read_masked_corpus(fh)
        comms = build_communities(ads)
        corpora[region] = SyntheticCorpus(
            region=region,
            ads=ads,
            samples=expand_samples(ads, comms.labels),
            text_emb=load_embeddings(os.path.join(directory, f"{tag}.text.emb")),
            image_emb=load_embeddings(os.path.join(directory, f"{tag}.image.emb")),
            communities=comms,
        )
    return manifest, corpora


def _cmd_synth(args, config) -> int:
    defaults = SyntheticSpec()
    spec = SyntheticSpec(
        vendors=int(_resolve(args, config, "vendors", defaults.vendors)),
        ads_per_vendor=int(_resolve(args, config, "ads_per_vendor", defaults.ads_per_vendor)),
        images_per_ad=int(_resolve(args, config, "images_per_ad", defaults.images_per_ad)),
        cluster_spread=float(_resolve(args, config, "spread", defaults.cluster_spread)),
        rho=float(_resolve(args, config, "rho", defaults.rho)),
        twin_separation=float(
            _resolve(args, config, "twin_separation", defaults.twin_separation)
        ),
        nuisance_scale=float(
            _resolve(args, config, "nuisance_scale", defaults.nuisance_scale)
        ),
        text_dim=int(_resolve(args, config, "text_dim", defaults.text_dim)),
        image_dim=int(_resolve(args, config, "image_dim", defaults.image_dim)),
        seed=int(_resolve(args, config, "seed", defaults.seed)),
    )
    regions = _resolve(args, config, "regions", "South")
    if isinstance(regions, str):
        regions = [r for r in regions.split(",") if r]
    shared = float(_resolve(args, config, "shared_fraction", 0.5))
    os.makedirs(args.output_dir, exist_ok=True)
    if len(regions) == 1:
        corpora = {regions[0]: generate_synthetic(spec, regions[0])}
    else:
        corpora = make_regional_corpora(spec, regions, shared_fraction=shared)
    for region, corpus in corpora.items():
        tag = region.lower()
        base = os.path.join(args.output_dir, tag)
        with _atomic_path(base + ".masked.jsonl") as tmp:
            with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                write_masked_corpus(corpus.ads, fh)
        with _atomic_path(base + ".text.emb") as tmp:
            save_embeddings(corpus.text_emb, tmp)
        with _atomic_path(base + ".image.emb") as tmp:
            save_embeddings(corpus.image_emb, tmp)
        with _atomic_path(base + ".labels.csv") as tmp:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                write_labels_csv(corpus.communities, fh)
    manifest = {
        "regions": list(corpora),
        "spec": asdict(spec),
        "shared_fraction": shared,
        "version": __version__,
    }
    _atomic_write_text(
        os.path.join(args.output_dir, "manifest.json"),
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
    )
    if args.json:
        print(json.dumps({"regions": list(corpora), "output_dir": args.output_dir}, sort_keys=True))
    else:
        for region, corpus in corpora.items():
            print(
                f"{region}: {len(corpus.ads)} ads, {len(corpus.samples)} samples, "
                f"{corpus.communities.num_vendors} vendors"
            )
    return EXIT_OK


def _cmd_eval(args, config) -> int:
    manifest, corpora = _read_corpus_dir(args.corpus_dir)
    regions = manifest["regions"]
    mode = _resolve(args, config, "mode", "retrieval")
    exp = ExperimentConfig(
        train_region=_resolve(args, config, "train_region", regions[0]),
        eval_regions=tuple(
            r for r in _resolve(args, config, "eval_regions", regions[1:]) if r
        ),
        modality=_resolve(args, config, "modality", "text"),
        fusion_strategy=_resolve(args, config, "fusion", "mean"),
        objective=_resolve(args, config, "objective", "ce_supcon"),
        train=_train_config(args, config),
        hidden_dim=int(_resolve(args, config, "hidden_dim", 32)),
        seed=int(_resolve(args, config, "seed", 1111)),
    )
    if mode == "identification":
        report = run_identification(exp, corpora[exp.train_region])
    elif mode == "retrieval":
        report = run_verification_retrieval(exp, corpora)
    else:
        raise DataError(f"unknown eval mode {mode!r}")
    payload = report.to_json()
    if args.output:
        _atomic_write_text(args.output, payload)
    if args.csv:
        _atomic_write_text(args.csv, _flatten_report_csv(report))
    if args.json or not args.output:
        print(payload, end="")
    else:
        print(f"wrote {report.kind} report -> {args.output}")
    return EXIT_OK


def _flatten_report_csv(report) -> str:
    """One row per (scope, metric) for spreadsheet use."""
    lines = ["scope,metric,mean,std"]
    if report.classification:
        for name, value in sorted(report.classification["test"].items()):
            lines.append(f"test,{name},{value!r},")
    for scope, metrics in (report.regions or {}).items():
        for name, payload in sorted(metrics.items()):
            lines.append(f"{scope},{name},{payload['mean']!r},{payload['std']!r}")
    for name, payload in sorted((report.ood_average or {}).items()):
        lines.append(f"ood_average,{name},{payload['mean']!r},{payload['std']!r}")
    return "\n".join(lines) + "\n"


def _cmd_retrieve(args, config) -> int:
    docs = load_embeddings(args.index)
    queries = load_embeddings(args.queries)
    if args.query_id:
        queries = queries.select([args.query_id])
    k = int(_resolve(args, config, "k", 10))
    workers = int(_resolve(args, config, "workers", 1))
    idx = build_index(docs)
    hits = search(idx, normalized_matrix(queries), k, workers=workers)
    if args.json:
        payload = [
            {"query": qid, "hits": [{"doc": d, "score": s} for d, s in row]}
            for qid, row in zip(queries.ids, hits)
        ]
        print(json.dumps(payload, sort_keys=True))
    else:
        for qid, row in zip(queries.ids, hits):
            print(f"query {qid}")
            for rank, (doc, score) in enumerate(row, start=1):
                print(f"  {rank:3d}  {score:8.4f}  {doc}")
    return EXIT_OK


def _cmd_graph(args, config) -> int:
    docs = load_embeddings(args.index)
    queries = load_embeddings(args.queries)
    if args.query_id not in queries.ids:
        raise DataError(f"query id {args.query_id!r} not found in {args.queries}")
    mode = _resolve(args, config, "mode", "mrr")
    internal_mode = {"mrr": "mrr_k", "r_precision": "r_precision"}.get(mode)
    if internal_mode is None:
        raise DataError(f"unknown graph mode {mode!r}")
    cutoff = int(_resolve(args, config, "k", 10))
    theta = float(_resolve(args, config, "theta", 0.5))
    fmt = _resolve(args, config, "format", "dot")
    idx = build_index(docs)
    vec = queries.row(args.query_id)
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise DataError(f"query {args.query_id!r} has a zero embedding")
    g = build_graph(idx, (args.query_id, vec / norm), internal_mode, cutoff, theta)
    text = export_graph(g, format=fmt)
    if args.output:
        _atomic_write_text(args.output, text)
        if not args.json:
            print(f"wrote {fmt} graph ({len(g.nodes)} nodes, {len(g.edges)} edges) -> {args.output}")
        else:
            print(json.dumps({"nodes": len(g.nodes), "edges": len(g.edges)}, sort_keys=True))
    else:
        print(text, end="")
    return EXIT_OK


def _gradcheck_cases(seed: int):
    rng = np.random.default_rng(seed)

    def unit_rows(n, d):
        m = rng.standard_normal((n, d))
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    logits = rng.standard_normal((4, 3))
    labels = rng.integers(0, 3, size=4)
    yield "ce", {"logits": logits}, lambda inp: ce_loss(inp["logits"], labels)

    z = unit_rows(6, 5)
    y = np.array([0, 0, 1, 1, 2, 2])
    yield "supcon", {"embeddings": z}, lambda inp: supcon_loss(
        Batch(inp["embeddings"], y), temperature=0.5
    )

    zt = unit_rows(6, 5)
    batch = Batch(zt, y)
    from .objectives import mine_triplets

    trip = mine_triplets(batch, 5)
    yield "triplet", {"embeddings": zt}, lambda inp: mined_triplet_loss(
        Batch(inp["embeddings"], y), margin=0.5, triplets=trip
    )

    t = unit_rows(5, 4)
    v = unit_rows(5, 4)
    yield "ntxent_itc", {"text_emb": t, "image_emb": v}, lambda inp: ntxent_itc_loss(
        inp["text_emb"], inp["image_emb"], temperature=0.5
    )


def _cmd_gradcheck(args, config) -> int:
    seeds = int(_resolve(args, config, "seeds", 20))
    eps = float(_resolve(args, config, "eps", 1e-5))
    tolerance = float(_resolve(args, config, "tolerance", 1e-4))
    worst: dict[str, float] = {}
    for s in range(seeds):
        for name, inputs, fn in _gradcheck_cases(1000 + s):
            err = grad_check(fn, inputs, eps=eps)
            worst[name] = max(worst.get(name, 0.0), err)
    rows = [
        {"loss": name, "max_rel_error": float(err), "pass": bool(err <= tolerance)}
        for name, err in sorted(worst.items())
    ]
    ok = all(r["pass"] for r in rows)
    if args.json:
        print(json.dumps({"results": rows, "pass": ok}, sort_keys=True))
    else:
        for r in rows:
            status = "PASS" if r["pass"] else "FAIL"
            print(f"{r['loss']:<12} {r['max_rel_error']:.3e}  {status}")
    return EXIT_OK if ok else EXIT_DATA


def _cmd_verify(args, config) -> int:
    ok = sidecar_checksum_ok(args.path)
    if args.json:
        print(json.dumps({"path": args.path, "checksum_ok": ok}, sort_keys=True))
    else:
        print(f"{args.path}: checksum {'ok' if ok else 'MISMATCH'}")
    return EXIT_OK if ok else EXIT_DATA


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="adlink", description=__doc__)
    parser.add_argument("--version", action="version", version=f"adlink {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p: _Parser):
        p.add_argument("--config", help="flat JSON config file; flags override it")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--json", action="store_true", help="machine-readable stdout")
        p.add_argument("--workers", type=int, help="max parallel workers")

    p = sub.add_parser("ingest", help="parse raw ads, mask PII, write masked corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--output", required=True)
    common(p)
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("communities", help="build vendor labels from shared identifiers")
    p.add_argument("--input", required=True, help="masked corpus JSONL")
    p.add_argument("--output", required=True, help="labels CSV")
    p.add_argument("--min-ads", dest="min_ads", type=int)
    common(p)
    p.set_defaults(fn=_cmd_communities)

    p = sub.add_parser("embed", help="hash-embed a masked corpus or import a sidecar")
    p.add_argument("--input", help="masked corpus JSONL")
    p.add_argument("--import", dest="import_path", help="existing sidecar to re-encode")
    p.add_argument("--output", required=True)
    p.add_argument("--binary", action="store_true", default=None)
    p.add_argument("--dim", type=int)
    p.add_argument("--ngram-min", dest="ngram_min", type=int)
    p.add_argument("--ngram-max", dest="ngram_max", type=int)
    p.add_argument("--expect-dim", dest="expect_dim", type=int)
    common(p)
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("train", help="train the projection/classifier head")
    p.add_argument("--embeddings", required=True, help="sidecar file")
    p.add_argument("--labels", required=True, help="labels CSV")
    p.add_argument("--output", required=True, help="checkpoint path")
    p.add_argument("--history", help="write history JSON here")
    p.add_argument("--objective", choices=["ce", "ce_supcon", "ce_triplet", "supcon", "triplet"])
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--activation", choices=["none", "relu"])
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="run identification or retrieval evaluation")
    p.add_argument("--corpus-dir", dest="corpus_dir", required=True)
    p.add_argument("--mode", choices=["identification", "retrieval"])
    p.add_argument("--modality", choices=["text", "vision", "multimodal"])
    p.add_argument("--objective")
    p.add_argument("--fusion", choices=["mean", "concat", "attention", "gated"])
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--output")
    p.add_argument("--csv", help="also write a flat CSV of the report")
    common(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("retrieve", help="ad-hoc top-K cosine retrieval")
    p.add_argument("--index", required=True, help="document sidecar")
    p.add_argument("--queries", required=True, help="query sidecar")
    p.add_argument("--query-id", dest="query_id", help="restrict to one query id")
    p.add_argument("--k", type=int)
    common(p)
    p.set_defaults(fn=_cmd_retrieve)

    p = sub.add_parser("graph", help="export a knowledge graph around a query ad")
    p.add_argument("--index", required=True, help="document sidecar")
    p.add_argument("--queries", required=True, help="query sidecar")
    p.add_argument("--query-id", dest="query_id", required=True)
    p.add_argument("--mode", choices=["mrr", "r_precision"])
    p.add_argument("--k", type=int, help="cutoff (K for mrr, X for r_precision)")
    p.add_argument("--theta", type=float)
    p.add_argument("--format", choices=["dot", "json"])
    p.add_argument("--output")
    common(p)
    p.set_defaults(fn=_cmd_graph)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seeds", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--tolerance", type=float)
    common(p)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic multi-region corpus")
    p.add_argument("--output-dir", dest="output_dir", required=True)
    p.add_argument("--vendors", type=int)
    p.add_argument("--ads-per-vendor", dest="ads_per_vendor", type=int)
    p.add_argument("--images-per-ad", dest="images_per_ad", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--spread", type=float)
    p.add_argument("--twin-separation", dest="twin_separation", type=float)
    p.add_argument("--nuisance-scale", dest="nuisance_scale", type=float)
    p.add_argument("--text-dim", dest="text_dim", type=int)
    p.add_argument("--image-dim", dest="image_dim", type=int)
    p.add_argument("--regions", help="comma-separated region list")
    p.add_argument("--shared-fraction", dest="shared_fraction", type=float)
    common(p)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("verify", help="recompute a binary sidecar's checksum")
    p.add_argument("--path", required=True)
    common(p)
    p.set_defaults(fn=_cmd_verify)

    return parser


def run_command(argv) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_help()
        return EXIT_USAGE
    try:
        config = _load_config(args.config)
        return args.fn(args, config)
    except DataError as exc:
        print(f"adlink {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, FloatingPointError, KeyError, OSError) as exc:
        print(f"adlink {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main(argv=None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
