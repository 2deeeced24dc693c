"""Knowledge-graph completion with path-based context filtering."""

__version__ = "0.1.0"

from .graph import (
    FORWARD,
    INVERSE,
    Edge,
    Graph,
    GraphLoadError,
    GraphSplit,
    Triplet,
    load_graph,
    load_split,
)
from .paths import InferencePath, enumerate_paths, textualize_path, textualize_triplet

__all__ = [
    "FORWARD",
    "INVERSE",
    "Edge",
    "Graph",
    "GraphLoadError",
    "GraphSplit",
    "InferencePath",
    "Triplet",
    "enumerate_paths",
    "load_graph",
    "load_split",
    "textualize_path",
    "textualize_triplet",
]
