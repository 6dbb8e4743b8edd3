"""Attention-path attribution: which graph nodes fed the target node's final
state, and with what weight.

The two-layer encoder moves information along edges twice, so everything the
target node sees arrived over a path of one or two message edges. Each path's
weight is the product of the attention coefficients along it (layer 1 for the
first hop, layer 2 for the second). An edge's score sums the weights of the
paths it introduces; a node's score sums its outgoing edges. The pooling and
normalization stages after the attention layers are weight-free routing, so
they are not part of the decomposition.

All accumulation happens in a fixed order (paths sorted per edge, edges by
index), making scores bit-reproducible for a given graph and parameter set.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .gat import (
    GraphEncoderParams,
    gatv2_attention,
    gatv2_layer_forward_cached,
    leaky_relu,
    with_self_loops,
)
from .textembed import NumericGraph

CONSERVATION_TOL = 1e-6


class AttributionError(RuntimeError):
    """Internal consistency check of the attribution pass failed."""


@dataclass
class AttributionResult:
    target_node_index: int
    message_edges: np.ndarray  # (E_aug, 2) including self-loops
    edge_scores: np.ndarray  # (E_aug,)
    node_scores: np.ndarray  # (N,)
    omitted_nodes: list[int]  # no path of <= 2 hops to the target
    node_ids: list[str] = field(default_factory=list)
    node_labels: list[str] = field(default_factory=list)
    source_image_id: str = ""

    def ranked_nodes(self) -> list[tuple[int, float]]:
        """(node index, score) sorted by score desc, node id asc; omitted and
        target excluded."""
        omitted = set(self.omitted_nodes)
        rows = [
            (i, float(self.node_scores[i]))
            for i in range(len(self.node_scores))
            if i != self.target_node_index and i not in omitted
        ]
        key_id = (
            self.node_ids
            if self.node_ids
            else [str(i) for i in range(len(self.node_scores))]
        )
        rows.sort(key=lambda r: (-r[1], key_id[r[0]]))
        return rows


def _check_conservation(alpha: np.ndarray, dst: np.ndarray, n_nodes: int, layer: str) -> None:
    sums = np.zeros(n_nodes, dtype=np.float64)
    np.add.at(sums, dst, alpha)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > CONSERVATION_TOL:
        raise AttributionError(
            f"{layer} attention sums deviate from 1 by {worst:.3e} "
            f"(tolerance {CONSERVATION_TOL:g})"
        )


def gatt_attribute(
    params: GraphEncoderParams,
    graph: NumericGraph,
    target: int | None = None,
) -> AttributionResult:
    """Score every message edge and node by attention mass reaching ``target``.

    Works on the self-loop-augmented edge list (the one the encoder actually
    uses), with the target defaulting to the graph's person node. Paths are
    deduplicated: a two-hop path that can be described several ways (for
    example "wait on u, then hop to the target" arises both from the real
    edge and from u's self-loop) is counted once, credited to the real edge.
    """
    if target is None:
        target = graph.person_node_index
    if not 0 <= target < graph.num_nodes:
        raise ValueError(f"target index {target} outside 0..{graph.num_nodes - 1}")

    aug = with_self_loops(graph, params.self_loop_edge_fill)
    src = aug.edge_index[:, 0]
    dst = aug.edge_index[:, 1]
    n_edges = aug.num_edges
    n_real = graph.num_edges  # self-loop of node u sits at index n_real + u

    h1, cache1 = gatv2_layer_forward_cached(params.layer1, aug, aug.node_features)
    alpha1 = cache1.alpha
    h1_act = leaky_relu(h1, params.layer1.negative_slope)
    alpha2 = gatv2_attention(params.layer2, aug, h1_act)
    _check_conservation(alpha1, dst, aug.num_nodes, "layer 1")
    _check_conservation(alpha2, dst, aug.num_nodes, "layer 2")

    # Second-hop candidates, grouped by their source node, in edge order.
    into_target: dict[int, list[int]] = {}
    for f in range(n_edges):
        if dst[f] == target:
            into_target.setdefault(int(src[f]), []).append(f)

    seen: set[tuple[int, ...]] = set()
    per_edge: list[list[tuple[tuple[int, ...], float]]] = [[] for _ in range(n_edges)]
    for e in range(n_edges):
        u, v = int(src[e]), int(dst[e])
        if v == target:
            path = (e,)
            if path not in seen:
                seen.add(path)
                per_edge[e].append((path, float(alpha1[e])))
        for f in into_target.get(v, ()):
            path = (e, f)
            if path not in seen:
                seen.add(path)
                per_edge[e].append((path, float(alpha1[e]) * float(alpha2[f])))
        if v == target:
            loop_u = n_real + u
            path = (loop_u, e)
            if path not in seen:
                seen.add(path)
                per_edge[e].append((path, float(alpha1[loop_u]) * float(alpha2[e])))

    edge_scores = np.zeros(n_edges, dtype=np.float64)
    for e in range(n_edges):
        total = 0.0
        for _, score in sorted(per_edge[e], key=lambda item: item[0]):
            total += score
        edge_scores[e] = total

    node_scores = np.zeros(aug.num_nodes, dtype=np.float64)
    for e in range(n_edges):
        node_scores[int(src[e])] += edge_scores[e]

    # Reachability within two hops; everything else is structurally silent.
    one_hop = np.zeros(aug.num_nodes, dtype=bool)
    one_hop[np.asarray(src)[np.asarray(dst) == target]] = True
    covered = np.zeros(aug.num_nodes, dtype=bool)
    for e in range(n_edges):
        if dst[e] == target or one_hop[dst[e]]:
            covered[src[e]] = True
    omitted = [i for i in range(aug.num_nodes) if not covered[i]]
    for i in omitted:
        if node_scores[i] != 0.0:
            raise AttributionError(
                f"node {i} unreachable within two hops but scored {node_scores[i]!r}"
            )

    return AttributionResult(
        target_node_index=target,
        message_edges=aug.edge_index,
        edge_scores=edge_scores,
        node_scores=node_scores,
        omitted_nodes=omitted,
        node_ids=list(graph.node_ids),
        node_labels=list(graph.node_labels),
        source_image_id=graph.source_image_id,
    )


def render_attribution(result: AttributionResult) -> str:
    """Human-readable score sheet, one node per line in node-index order.

    Nodes with no two-hop path to the target are listed separately without a
    score; everything shown is reproducible to the printed six decimals.
    """
    ids = result.node_ids or [str(i) for i in range(len(result.node_scores))]
    labels = result.node_labels or ids
    lines = []
    if result.source_image_id:
        lines.append(f"image: {result.source_image_id}")
    lines.append(f"target: {ids[result.target_node_index]}")
    lines.append("node scores:")
    omitted = set(result.omitted_nodes)
    width = max((len(labels[i]) for i in range(len(ids)) if i not in omitted), default=0)
    for i in range(len(ids)):
        if i in omitted:
            continue
        marker = " <- target" if i == result.target_node_index else ""
        lines.append(f"  {labels[i]:<{width}}  {result.node_scores[i]:.6f}{marker}")
    if result.omitted_nodes:
        names = ", ".join(labels[i] for i in result.omitted_nodes)
        lines.append(f"omitted (no two-hop path): {names}")
    return "\n".join(lines) + "\n"


def attribution_csv(result: AttributionResult) -> str:
    """node_index,node_id,label,score,omitted rows for the whole graph."""
    ids = result.node_ids or [str(i) for i in range(len(result.node_scores))]
    labels = result.node_labels or ids
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["node_index", "node_id", "label", "score", "omitted"])
    omitted = set(result.omitted_nodes)
    for i in range(len(ids)):
        writer.writerow(
            [i, ids[i], labels[i], repr(float(result.node_scores[i])), int(i in omitted)]
        )
    return buf.getvalue()
