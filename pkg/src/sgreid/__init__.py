"""Scene-graph person re-identification risk toolkit.

Converts textual scene graphs of person images into numeric graphs, encodes
them with a two-layer graph attention network, fuses them with visual
features, trains a retrieval embedding, and scores re-identification risk
with ranking metrics, re-ranking, and attention-path attribution.
"""

from .attribution import AttributionResult, gatt_attribute, render_attribution
from .data import (
    DatasetManifest,
    GraphStore,
    PersonSample,
    generate_synthetic_dataset,
    ingest,
)
from .evalkit import EvalOptions, cmc_map, evaluate, k_reciprocal_rerank, pairwise_distances
from .gat import graph_encode, gatv2_layer_forward, init_encoder_params
from .kernels import BACKEND as KERNEL_BACKEND
from .scenegraph import (
    SceneGraph,
    expand_attributes,
    fix_malformed_json,
    llm_repair,
    parse_scene_graph,
    reverse_flow,
)
from .textembed import NumericGraph, numerify_graph
from .trainkit import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttributionResult",
    "DatasetManifest",
    "EvalOptions",
    "GraphStore",
    "KERNEL_BACKEND",
    "NumericGraph",
    "PersonSample",
    "SceneGraph",
    "TrainConfig",
    "__version__",
    "cmc_map",
    "evaluate",
    "expand_attributes",
    "fix_malformed_json",
    "gatt_attribute",
    "gatv2_layer_forward",
    "generate_synthetic_dataset",
    "graph_encode",
    "ingest",
    "init_encoder_params",
    "k_reciprocal_rerank",
    "llm_repair",
    "numerify_graph",
    "pairwise_distances",
    "parse_scene_graph",
    "render_attribution",
    "reverse_flow",
    "train",
]
