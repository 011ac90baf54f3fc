"""Python bindings for the opensat retrieval engine."""

from ._core import (
    MockEmbedder,
    OpenSatError,
    Store,
    TileRect,
    base_prompt,
    class_metrics,
    composed_prompt,
    cosine_similarity,
    l2_normalize,
    plan_grid,
    read_embeddings,
    refine,
    refine_single,
    surrounding_prompt,
)

__all__ = [
    "MockEmbedder",
    "OpenSatError",
    "Store",
    "TileRect",
    "base_prompt",
    "class_metrics",
    "composed_prompt",
    "cosine_similarity",
    "l2_normalize",
    "plan_grid",
    "read_embeddings",
    "refine",
    "refine_single",
    "surrounding_prompt",
]

__version__ = "0.1.0"
