"""Sentence-embedding clients and the numeric graph form consumed by the encoder.

Node and relation strings are mapped to 384-dim float vectors through a
pluggable client. Three client flavours exist:

* ``StubEmbedClient`` derives a unit vector from a seeded hash of the string,
  so the whole system runs deterministically with zero external services;
* ``FixtureEmbedClient`` replays vectors recorded from a real embedding
  service (line-delimited JSON, one {"text", "vector"} record per line);
* ``CallableEmbedClient`` adapts any ``str -> vector`` function (live mode).

``CachingEmbedClient`` wraps any of them with an exact-string cache (no
casefolding: "Red" and "red" may carry different signal) and optional
write-through persistence in the fixture format.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .scenegraph import SceneGraph

logger = logging.getLogger(__name__)

EMBED_DIM = 384
PERSON_NODE_ID = "person"


class EmbedUnavailable(RuntimeError):
    """The embedding client cannot produce a vector for this string."""


class MissingPersonNode(ValueError):
    """The graph has no node usable as the described subject."""


class EmbedClient(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class StubEmbedClient:
    """Deterministic stand-in embedder: seeded hash -> Gaussian -> unit norm."""

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


class FixtureEmbedClient:
    """Replays recorded text -> vector pairs; unknown text is an error."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._table: dict[str, np.ndarray] = {}
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._table[rec["text"]] = np.asarray(rec["vector"], dtype=np.float64)
        if not self._table:
            raise EmbedUnavailable(f"no embedding fixtures at {self.path}")
        self.dim = len(next(iter(self._table.values())))

    def embed(self, text: str) -> np.ndarray:
        try:
            return self._table[text]
        except KeyError:
            raise EmbedUnavailable(f"no recorded embedding for {text!r}") from None


class CallableEmbedClient:
    """Adapter for a live embedding function."""

    def __init__(self, fn: Callable[[str], np.ndarray], dim: int = EMBED_DIM):
        self._fn = fn
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        return np.asarray(self._fn(text), dtype=np.float64)


class CachingEmbedClient:
    """Exact-string cache around another client, with optional persistence.

    When ``store_path`` is given, new vectors are appended to that file in the
    fixture format, so a run's vocabulary can later be replayed offline.
    """

    def __init__(self, inner: EmbedClient, store_path: str | Path | None = None):
        self.inner = inner
        self.dim = inner.dim
        self._cache: dict[str, np.ndarray] = {}
        self._store_path = Path(store_path) if store_path is not None else None
        if self._store_path is not None and self._store_path.exists():
            with open(self._store_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rec = json.loads(line)
                        self._cache[rec["text"]] = np.asarray(rec["vector"], dtype=np.float64)

    def embed(self, text: str) -> np.ndarray:
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        v = self.inner.embed(text)
        self._cache[text] = v
        if self._store_path is not None:
            with open(self._store_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"text": text, "vector": v.tolist()}) + "\n")
        return v


def embed_text(s: str, client: EmbedClient) -> np.ndarray:
    """Embed one string; validates non-emptiness, dimension, and finiteness."""
    if not s:
        raise ValueError("cannot embed an empty string")
    v = np.asarray(client.embed(s), dtype=np.float64)
    if v.shape != (client.dim,):
        raise ValueError(f"client returned shape {v.shape}, expected ({client.dim},)")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite embedding for {s!r}")
    return v


@dataclass
class NumericGraph:
    """Index-aligned numeric form of an expanded, flow-reversed scene graph.

    edge_index rows are (source, destination) in message orientation.
    node_ids keeps the original string ids for rendering and debugging.
    """

    node_features: np.ndarray  # (N, D)
    edge_index: np.ndarray  # (E, 2) int64
    edge_features: np.ndarray  # (E, D)
    person_node_index: int
    source_image_id: str = ""
    node_ids: list[str] = field(default_factory=list)
    node_labels: list[str] = field(default_factory=list)  # display text per node

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_index.shape[0]


def numerify_graph(
    g: SceneGraph, client: EmbedClient, strict_person: bool = True
) -> NumericGraph:
    """Embed every node label and relation string of an expanded graph.

    Node features embed the raw label (attribute nodes embed their attribute
    string, never the collision-suffixed id). Edge features embed the relation
    string. With ``strict_person`` a graph without a "person" node raises
    MissingPersonNode; batch pipelines pass False to fall back to node 0 with
    a warning instead of dropping the graph.
    """
    if not (g.attributes_expanded and g.flow_reversed):
        raise ValueError("numerify_graph expects an expanded, flow-reversed graph")
    if not g.nodes:
        raise ValueError("graph has no nodes")

    node_features = np.stack([embed_text(n.text, client) for n in g.nodes])
    index = g.node_index()
    if g.edges:
        edge_index = np.array(
            [[index[e.source], index[e.target]] for e in g.edges], dtype=np.int64
        )
        edge_features = np.stack([embed_text(e.relation, client) for e in g.edges])
    else:
        edge_index = np.zeros((0, 2), dtype=np.int64)
        edge_features = np.zeros((0, client.dim), dtype=np.float64)

    person = next(
        (i for i, n in enumerate(g.nodes) if n.id.strip().lower() == PERSON_NODE_ID), None
    )
    if person is None:
        if strict_person:
            raise MissingPersonNode(
                f"graph {g.source_image_id or '<unnamed>'} has no person node"
            )
        logger.warning(
            "graph %s has no person node; using node 0 (%r) as root",
            g.source_image_id or "<unnamed>",
            g.nodes[0].id,
        )
        person = 0

    return NumericGraph(
        node_features=node_features,
        edge_index=edge_index,
        edge_features=edge_features,
        person_node_index=person,
        source_image_id=g.source_image_id,
        node_ids=[n.id for n in g.nodes],
        node_labels=[n.text for n in g.nodes],
    )
