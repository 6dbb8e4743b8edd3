"""Shared fixtures: random graph builders, a session-scoped synthetic
dataset, small components, and one small trained checkpoint reused by the
evaluation and CLI tests.
"""

from __future__ import annotations

import numpy as np
import pytest

from sgreid.data import Components, GraphStore, generate_synthetic_dataset
from sgreid.gat import init_encoder_params
from sgreid.textembed import CachingEmbedClient, NumericGraph, StubEmbedClient
from sgreid.trainkit import TrainConfig, train
from sgreid.visual import StubBackbone

SMALL = dict(embed_dim=32, hidden_dim=32, out_dim=16, backbone_dim=24)


def make_graph(
    rng: np.random.Generator,
    n_nodes: int,
    n_edges: int,
    dim: int,
    allow_reciprocal: bool = True,
) -> NumericGraph:
    """Random numeric graph (no self-loops; the encoder adds those)."""
    pairs = []
    seen = set()
    attempts = 0
    while len(pairs) < n_edges and attempts < 50 * n_edges + 100:
        attempts += 1
        u = int(rng.integers(n_nodes))
        v = int(rng.integers(n_nodes))
        if u == v or (u, v) in seen:
            continue
        if not allow_reciprocal and (v, u) in seen:
            continue
        seen.add((u, v))
        pairs.append((u, v))
    edge_index = (
        np.array(pairs, dtype=np.int64) if pairs else np.zeros((0, 2), dtype=np.int64)
    )
    return NumericGraph(
        node_features=rng.standard_normal((n_nodes, dim)),
        edge_index=edge_index,
        edge_features=rng.standard_normal((len(pairs), dim)),
        person_node_index=0,
        node_ids=[f"n{i}" for i in range(n_nodes)],
        node_labels=[f"n{i}" for i in range(n_nodes)],
    )


def small_encoder(rng: np.random.Generator, dim: int, hidden: int = 8, out: int = 6):
    return init_encoder_params(
        rng, node_dim=dim, hidden_dim=hidden, out_dim=out, edge_dim=dim
    )


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthdata")
    manifest = generate_synthetic_dataset(root)
    return root, manifest


@pytest.fixture(scope="session")
def small_components(synth_root):
    root, _ = synth_root
    return Components(
        graph_store=GraphStore(root / "graphs"),
        embed_client=CachingEmbedClient(
            StubEmbedClient(dim=SMALL["embed_dim"], seed=5)
        ),
        backbone=StubBackbone(dim=SMALL["backbone_dim"], seed=9),
    )


def small_train_config(seed: int = 3, epochs: int = 2) -> TrainConfig:
    return TrainConfig(
        batch_size=16,
        instances_per_id=4,
        epochs=epochs,
        base_lr=0.00035,
        warmup_epochs=10,
        decay_epochs=(40, 70),
        seed=seed,
        hidden_dim=SMALL["hidden_dim"],
        out_dim=SMALL["out_dim"],
    )


@pytest.fixture(scope="session")
def tiny_run(synth_root, small_components, tmp_path_factory):
    """One short training run shared by evaluation-oriented tests."""
    _, manifest = synth_root
    workdir = tmp_path_factory.mktemp("tinyrun")
    result = train(manifest, small_train_config(), small_components, workdir)
    return manifest, result
