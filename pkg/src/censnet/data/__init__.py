"""Dataset formats, derived features, splits and synthetic generators."""
from .features import derive_citation_edge_features, endpoint_cosine, with_citation_edge_features
from .io import (
    DatasetManifest,
    graph_fingerprint,
    load_graph_dataset,
    load_sparse_matrix,
    read_manifest,
    save_graph_dataset,
    save_sparse_matrix,
)
from .splits import LinkSplit, NodeSplit, few_shot_split, graph_split, link_split
from .synth import (
    GENERATORS,
    planted_lowrank_graph,
    planted_partition_graph,
    planted_pooled_regression,
    planted_rule_molecules,
)

__all__ = [
    "DatasetManifest",
    "GENERATORS",
    "LinkSplit",
    "NodeSplit",
    "derive_citation_edge_features",
    "endpoint_cosine",
    "few_shot_split",
    "graph_fingerprint",
    "graph_split",
    "link_split",
    "load_graph_dataset",
    "planted_lowrank_graph",
    "planted_partition_graph",
    "planted_rule_molecules",
    "planted_pooled_regression",
    "read_manifest",
    "save_graph_dataset",
    "save_sparse_matrix",
    "load_sparse_matrix",
    "with_citation_edge_features",
]
