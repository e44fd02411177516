"""adlink: vendor linking and authorship attribution over ad corpora.

Pipeline: parse and mask raw ads, derive vendor ground truth from shared
identifiers, embed text (or import backbone embeddings), train a
multitask projection/classifier head, retrieve by exact cosine search,
score with per-vendor retrieval metrics, and export investigation graphs.
"""

__version__ = "0.1.0"

from .communities import VendorCommunities, build_communities, filter_min_ads
from .embedder import (
    EmbeddingMatrix,
    HashEmbedConfig,
    HashingTextEmbedder,
    ModalityFusion,
    fuse,
    hash_embed_text,
    load_embeddings,
    save_embeddings,
)
from .head import (
    HeadParams,
    TrainConfig,
    TrainHistory,
    VendorHead,
    encode,
    init_head,
    predict,
    train_head,
)
from .index import CosineIndex, FlatIndex, build_index, search
from .metrics import (
    MetricReport,
    RetrievalRun,
    classification_report,
    macro_f1_at_x,
    mrr_at_k,
    r_precision_at_x,
)
from .objectives import (
    Batch,
    LossOutput,
    LossWeights,
    ce_loss,
    grad_check,
    joint_loss,
    mine_triplets,
    ntxent_itc_loss,
    supcon_loss,
    triplet_loss,
)
from .records import (
    DatasetSplit,
    MaskedAd,
    MultimodalSample,
    RawAd,
    build_ad_text,
    expand_samples,
    extract_identifiers,
    mask_text,
    parse_ads,
    split_dataset,
)
from .evaluation import (
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
from .graph import KnowledgeGraph, build_graph, export_graph, graph_from_json

__all__ = [
    "Batch",
    "CosineIndex",
    "DatasetSplit",
    "EmbeddingMatrix",
    "EvalReport",
    "ExperimentConfig",
    "FlatIndex",
    "HashEmbedConfig",
    "HashingTextEmbedder",
    "HeadParams",
    "KnowledgeGraph",
    "LossOutput",
    "LossWeights",
    "MaskedAd",
    "MetricReport",
    "ModalityFusion",
    "MultimodalSample",
    "RawAd",
    "RetrievalRun",
    "SyntheticSpec",
    "TrainConfig",
    "TrainHistory",
    "VendorCommunities",
    "VendorHead",
    "build_ad_text",
    "build_communities",
    "build_graph",
    "build_index",
    "ce_loss",
    "classification_report",
    "encode",
    "expand_samples",
    "export_graph",
    "extract_identifiers",
    "filter_min_ads",
    "fuse",
    "generate_synthetic",
    "grad_check",
    "graph_from_json",
    "hash_embed_text",
    "init_head",
    "joint_loss",
    "load_embeddings",
    "macro_f1_at_x",
    "make_regional_corpora",
    "mask_text",
    "mine_triplets",
    "mrr_at_k",
    "ntxent_itc_loss",
    "ood_average",
    "parse_ads",
    "predict",
    "r_precision_at_x",
    "run_identification",
    "run_verification_retrieval",
    "save_embeddings",
    "search",
    "shared_unique_breakdown",
    "split_dataset",
    "supcon_loss",
    "train_head",
    "triplet_loss",
]
