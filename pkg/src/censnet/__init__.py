"""Node/edge co-embedding graph neural networks on a graph and its line graph."""
from .graph import Graph, GraphBatch, LineGraphBundle, block_diag_batch, build_bundle, induced_subgraph

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "GraphBatch",
    "LineGraphBundle",
    "block_diag_batch",
    "build_bundle",
    "induced_subgraph",
    "__version__",
]
