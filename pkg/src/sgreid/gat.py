"""Graph attention encoder: two cascaded single-head attention layers with edge
features, global max pooling, and layer normalization, mapping a numeric graph
to a 128-dim vector.

Per message edge u -> v with edge feature e, a layer scores

    logit_uv = attn . LeakyReLU(W_src x_u + W_dst x_v + W_edge e)

normalises the logits with a softmax over each destination's incoming edges,
and aggregates

    h'_v = sum_u alpha_uv (W_src x_u + W_edge e_uv) + bias.

Self-loops (one per node, zero edge-feature fill, appended after the real
edges) guarantee every node receives at least one message. The encoder runs
layer 1, a LeakyReLU, layer 2, an elementwise max over each graph's nodes, and
a per-graph layer norm.

Everything is float64 and the backward passes are written out by hand; the
test suite checks every gradient against central finite differences. Batches
of graphs are processed as one disjoint-union graph with per-graph node
offsets for pooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .textembed import NumericGraph

DEFAULT_NEGATIVE_SLOPE = 0.2
LAYERNORM_EPS = 1e-5


class ShapeMismatch(ValueError):
    """Inputs whose shapes disagree with the layer's declared dimensions."""


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, 1.0, slope)


@dataclass
class GATLayerParams:
    w_src: np.ndarray  # (out_dim, in_dim)
    w_dst: np.ndarray  # (out_dim, in_dim)
    w_edge: np.ndarray  # (out_dim, edge_dim)
    attn: np.ndarray  # (out_dim,)
    bias: np.ndarray  # (out_dim,)
    negative_slope: float = DEFAULT_NEGATIVE_SLOPE

    @property
    def in_dim(self) -> int:
        return self.w_src.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w_src.shape[0]

    @property
    def edge_dim(self) -> int:
        return self.w_edge.shape[1]


@dataclass
class GraphEncoderParams:
    layer1: GATLayerParams
    layer2: GATLayerParams
    ln_gain: np.ndarray  # (out_dim,)
    ln_bias: np.ndarray  # (out_dim,)
    self_loop_edge_fill: np.ndarray  # (edge_dim,)

    @property
    def out_dim(self) -> int:
        return self.layer2.out_dim


def init_layer_params(
    rng: np.random.Generator,
    in_dim: int,
    out_dim: int,
    edge_dim: int,
    negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
) -> GATLayerParams:
    """Fan-in scaled uniform init for weights, zeros for the bias."""
    b_in = 1.0 / np.sqrt(in_dim)
    b_edge = 1.0 / np.sqrt(edge_dim)
    b_attn = 1.0 / np.sqrt(out_dim)
    return GATLayerParams(
        w_src=rng.uniform(-b_in, b_in, size=(out_dim, in_dim)),
        w_dst=rng.uniform(-b_in, b_in, size=(out_dim, in_dim)),
        w_edge=rng.uniform(-b_edge, b_edge, size=(out_dim, edge_dim)),
        attn=rng.uniform(-b_attn, b_attn, size=out_dim),
        bias=np.zeros(out_dim),
        negative_slope=negative_slope,
    )


def init_encoder_params(
    rng: np.random.Generator,
    node_dim: int = 384,
    hidden_dim: int = 384,
    out_dim: int = 128,
    edge_dim: int | None = None,
    negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
) -> GraphEncoderParams:
    if edge_dim is None:
        edge_dim = node_dim
    return GraphEncoderParams(
        layer1=init_layer_params(rng, node_dim, hidden_dim, edge_dim, negative_slope),
        layer2=init_layer_params(rng, hidden_dim, out_dim, edge_dim, negative_slope),
        ln_gain=np.ones(out_dim),
        ln_bias=np.zeros(out_dim),
        self_loop_edge_fill=np.zeros(edge_dim),
    )


def with_self_loops(graph: NumericGraph, fill: np.ndarray) -> NumericGraph:
    """Append one self-loop per node (in node order) after the real edges.

    The loop edge feature is ``fill`` (the encoder uses a zero vector, a
    neutral contribution through the edge projection).
    """
    n = graph.num_nodes
    loops = np.arange(n, dtype=np.int64)
    edge_index = np.concatenate(
        [graph.edge_index, np.stack([loops, loops], axis=1)], axis=0
    )
    edge_features = np.concatenate(
        [graph.edge_features, np.tile(np.asarray(fill, dtype=np.float64), (n, 1))], axis=0
    )
    return NumericGraph(
        node_features=graph.node_features,
        edge_index=edge_index,
        edge_features=edge_features,
        person_node_index=graph.person_node_index,
        source_image_id=graph.source_image_id,
        node_ids=list(graph.node_ids),
        node_labels=list(graph.node_labels),
    )


# ---------------------------------------------------------------------------
# Single layer


@dataclass
class LayerCache:
    """Forward intermediates needed by the analytic backward pass."""

    x: np.ndarray
    edge_feats: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    n_nodes: int
    src_proj: np.ndarray  # (N, out) node features through w_src
    dst_proj: np.ndarray  # (N, out) node features through w_dst
    edge_proj: np.ndarray  # (E, out) edge features through w_edge
    z: np.ndarray  # (E, out) pre-activation attention input
    q: np.ndarray  # (E, out) LeakyReLU(z)
    alpha: np.ndarray  # (E,)
    values: np.ndarray  # (E, out) message values


def _check_layer_inputs(
    params: GATLayerParams, graph: NumericGraph, node_states: np.ndarray
) -> None:
    if node_states.ndim != 2 or node_states.shape[0] != graph.num_nodes:
        raise ShapeMismatch(
            f"node_states {node_states.shape} not aligned with {graph.num_nodes} nodes"
        )
    if node_states.shape[1] != params.in_dim:
        raise ShapeMismatch(
            f"node_states dim {node_states.shape[1]} != layer in_dim {params.in_dim}"
        )
    if graph.edge_features.shape[1] != params.edge_dim:
        raise ShapeMismatch(
            f"edge feature dim {graph.edge_features.shape[1]} != layer edge_dim "
            f"{params.edge_dim}"
        )


def _layer_forward(
    params: GATLayerParams, graph: NumericGraph, node_states: np.ndarray
) -> tuple[np.ndarray, LayerCache]:
    _check_layer_inputs(params, graph, node_states)
    x = np.asarray(node_states, dtype=np.float64)
    edge_feats = np.asarray(graph.edge_features, dtype=np.float64)
    src = np.ascontiguousarray(graph.edge_index[:, 0], dtype=np.int64)
    dst = np.ascontiguousarray(graph.edge_index[:, 1], dtype=np.int64)
    n = graph.num_nodes

    src_proj = x @ params.w_src.T
    dst_proj = x @ params.w_dst.T
    edge_proj = edge_feats @ params.w_edge.T
    z = src_proj[src] + dst_proj[dst] + edge_proj
    q = leaky_relu(z, params.negative_slope)
    logits = np.ascontiguousarray(q @ params.attn)
    alpha = kernels.segment_softmax(logits, dst, n)
    values = src_proj[src] + edge_proj
    h = kernels.scatter_weighted_rowsum(
        np.ascontiguousarray(values), alpha, dst, n
    ) + params.bias
    cache = LayerCache(
        x=x,
        edge_feats=edge_feats,
        src=src,
        dst=dst,
        n_nodes=n,
        src_proj=src_proj,
        dst_proj=dst_proj,
        edge_proj=edge_proj,
        z=z,
        q=q,
        alpha=alpha,
        values=values,
    )
    return h, cache


def gatv2_attention(
    params: GATLayerParams, graph: NumericGraph, node_states: np.ndarray
) -> np.ndarray:
    """Attention coefficients over the graph's message edges.

    The graph must already carry its self-loops, which guarantee in-degree
    >= 1 everywhere, so the per-destination softmax is always well defined
    and sums to one.
    """
    _, cache = _layer_forward(params, graph, node_states)
    return cache.alpha


def gatv2_layer_forward(
    params: GATLayerParams, graph: NumericGraph, node_states: np.ndarray
) -> np.ndarray:
    """One attention layer; returns the updated node states (N, out_dim)."""
    h, _ = _layer_forward(params, graph, node_states)
    return h


def gatv2_layer_forward_cached(
    params: GATLayerParams, graph: NumericGraph, node_states: np.ndarray
) -> tuple[np.ndarray, LayerCache]:
    """Layer forward that also returns the cache for the backward pass."""
    return _layer_forward(params, graph, node_states)


def gatv2_layer_backward(
    params: GATLayerParams, cache: LayerCache, grad_out: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Analytic gradients of a scalar loss through one layer.

    Returns (parameter grads keyed like the dataclass fields, grad wrt input
    node states, grad wrt edge features).
    """
    src, dst, n = cache.src, cache.dst, cache.n_nodes
    g_dst = grad_out[dst]
    d_values = cache.alpha[:, None] * g_dst
    d_alpha = np.ascontiguousarray(np.sum(cache.values * g_dst, axis=1))
    d_logits = kernels.segment_softmax_backward(cache.alpha, d_alpha, dst, n)
    d_q = d_logits[:, None] * params.attn[None, :]
    d_attn = cache.q.T @ d_logits
    d_z = d_q * leaky_relu_grad(cache.z, params.negative_slope)

    d_src_rows = np.ascontiguousarray(d_z + d_values)
    d_edge_proj = d_src_rows  # same rows flow into the edge projection
    d_src_proj = kernels.scatter_rowsum(d_src_rows, src, n)
    d_dst_proj = kernels.scatter_rowsum(np.ascontiguousarray(d_z), dst, n)

    grads = {
        "w_src": d_src_proj.T @ cache.x,
        "w_dst": d_dst_proj.T @ cache.x,
        "w_edge": d_edge_proj.T @ cache.edge_feats,
        "attn": d_attn,
        "bias": grad_out.sum(axis=0),
    }
    grad_x = d_src_proj @ params.w_src + d_dst_proj @ params.w_dst
    grad_edge_feats = d_edge_proj @ params.w_edge
    return grads, grad_x, grad_edge_feats


# ---------------------------------------------------------------------------
# Two-layer encoder over a batch of graphs


@dataclass
class EncoderCache:
    offsets: np.ndarray  # (B+1,) node offsets of each graph in the union
    cache1: LayerCache
    h1: np.ndarray
    h1_act: np.ndarray
    cache2: LayerCache
    h2: np.ndarray
    argmax_rows: np.ndarray  # (B, out) union row index winning each pooled dim
    pooled: np.ndarray  # (B, out)
    xhat: np.ndarray  # (B, out) normalised pooled features
    inv_std: np.ndarray  # (B, 1)


def _union_graph(
    graphs: Sequence[NumericGraph], fill: np.ndarray
) -> tuple[NumericGraph, np.ndarray]:
    """Disjoint union of self-loop-augmented graphs plus node offsets."""
    offsets = np.zeros(len(graphs) + 1, dtype=np.int64)
    for b, g in enumerate(graphs):
        offsets[b + 1] = offsets[b] + g.num_nodes
    feats = []
    srcs = []
    dsts = []
    efeats = []
    for b, g in enumerate(graphs):
        aug = with_self_loops(g, fill)
        feats.append(aug.node_features)
        srcs.append(aug.edge_index[:, 0] + offsets[b])
        dsts.append(aug.edge_index[:, 1] + offsets[b])
        efeats.append(aug.edge_features)
    union = NumericGraph(
        node_features=np.concatenate(feats, axis=0),
        edge_index=np.stack(
            [np.concatenate(srcs), np.concatenate(dsts)], axis=1
        ),
        edge_features=np.concatenate(efeats, axis=0),
        person_node_index=0,
    )
    return union, offsets


def encode_graphs(
    params: GraphEncoderParams, graphs: Sequence[NumericGraph]
) -> tuple[np.ndarray, EncoderCache]:
    """Encode a batch of graphs to (B, out_dim) vectors, keeping the cache."""
    if not graphs:
        raise ValueError("encode_graphs needs at least one graph")
    union, offsets = _union_graph(graphs, params.self_loop_edge_fill)
    h1, cache1 = _layer_forward(params.layer1, union, union.node_features)
    h1_act = leaky_relu(h1, params.layer1.negative_slope)
    h2, cache2 = _layer_forward(params.layer2, union, h1_act)

    b = len(graphs)
    out_dim = params.layer2.out_dim
    pooled = np.empty((b, out_dim))
    argmax_rows = np.empty((b, out_dim), dtype=np.int64)
    for i in range(b):
        rows = h2[offsets[i] : offsets[i + 1]]
        local = np.argmax(rows, axis=0)
        argmax_rows[i] = local + offsets[i]
        pooled[i] = rows[local, np.arange(out_dim)]

    mean = pooled.mean(axis=1, keepdims=True)
    var = pooled.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = (pooled - mean) * inv_std
    out = params.ln_gain * xhat + params.ln_bias

    cache = EncoderCache(
        offsets=offsets,
        cache1=cache1,
        h1=h1,
        h1_act=h1_act,
        cache2=cache2,
        h2=h2,
        argmax_rows=argmax_rows,
        pooled=pooled,
        xhat=xhat,
        inv_std=inv_std,
    )
    return out, cache


def encode_graphs_backward(
    params: GraphEncoderParams, cache: EncoderCache, grad_out: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt all encoder parameters.

    Gradients wrt the (frozen) input embeddings are computed internally but
    not returned; text vectors are not trained.
    """
    d_xhat = grad_out * params.ln_gain
    d_gain = np.sum(grad_out * cache.xhat, axis=0)
    d_ln_bias = grad_out.sum(axis=0)
    # Per-row layer norm backward.
    d_pooled = cache.inv_std * (
        d_xhat
        - d_xhat.mean(axis=1, keepdims=True)
        - cache.xhat * np.mean(d_xhat * cache.xhat, axis=1, keepdims=True)
    )

    d_h2 = np.zeros_like(cache.h2)
    out_dim = d_pooled.shape[1]
    cols = np.tile(np.arange(out_dim), d_pooled.shape[0])
    np.add.at(d_h2, (cache.argmax_rows.ravel(), cols), d_pooled.ravel())

    grads2, d_h1_act, _ = gatv2_layer_backward(params.layer2, cache.cache2, d_h2)
    d_h1 = d_h1_act * leaky_relu_grad(cache.h1, params.layer1.negative_slope)
    grads1, _, _ = gatv2_layer_backward(params.layer1, cache.cache1, d_h1)

    grads = {f"l1.{k}": v for k, v in grads1.items()}
    grads.update({f"l2.{k}": v for k, v in grads2.items()})
    grads["ln_gain"] = d_gain
    grads["ln_bias"] = d_ln_bias
    return grads


def graph_encode(params: GraphEncoderParams, graph: NumericGraph) -> np.ndarray:
    """Encode one graph to its out_dim (128 by default) vector."""
    out, _ = encode_graphs(params, [graph])
    return out[0]


def encoder_param_dict(params: GraphEncoderParams) -> dict[str, np.ndarray]:
    """Named references to every trainable tensor (same keys as the grads)."""
    d: dict[str, np.ndarray] = {}
    for prefix, layer in (("l1", params.layer1), ("l2", params.layer2)):
        d[f"{prefix}.w_src"] = layer.w_src
        d[f"{prefix}.w_dst"] = layer.w_dst
        d[f"{prefix}.w_edge"] = layer.w_edge
        d[f"{prefix}.attn"] = layer.attn
        d[f"{prefix}.bias"] = layer.bias
    d["ln_gain"] = params.ln_gain
    d["ln_bias"] = params.ln_bias
    return d
