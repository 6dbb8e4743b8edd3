"""Filename parsing, manifests, graph store, and the synthetic corpus."""

from __future__ import annotations

import json
import logging

import numpy as np
import pytest
from PIL import Image

from sgreid.data import (
    DatasetManifest,
    FilenameFormat,
    GraphStore,
    IngestError,
    PersonSample,
    SPLIT_DIRS,
    generate_synthetic_dataset,
    ingest,
    parse_market_filename,
    parse_prefix_filename,
)
from sgreid.scenegraph import ParseFailure, parse_scene_graph


def _sample(image_id, identity, camera=1, split="train"):
    return PersonSample(
        image_path=f"/img/{image_id}.jpg",
        identity=identity,
        camera=camera,
        split=split,
        image_id=image_id,
    )


def test_market_filename_parsing():
    assert parse_market_filename("0002_c1s1_000451_03.jpg") == (2, 1)
    assert parse_market_filename("-1_c3s2_000001_00.png") == (-1, 3)
    assert parse_market_filename("1501_C6S3_075694_00.JPG") == (1501, 6)
    for bad in ("0002_c1s1_000451_03", "0002_c1_000451_03.jpg", "person.jpg",
                "0002_c1s1_000451_03.bmp"):
        with pytest.raises(FilenameFormat):
            parse_market_filename(bad)


def test_prefix_filename_parsing():
    assert parse_prefix_filename("0007_c2whatever.png") == (7, 2)
    assert parse_prefix_filename("-1_c1.jpg") == (-1, 1)
    with pytest.raises(FilenameFormat):
        parse_prefix_filename("c2_0007.png")


def test_manifest_validation_rules():
    ok = DatasetManifest(
        name="d",
        samples=[
            _sample("a", 1),
            _sample("b", 2),
            _sample("q1", 10, split="query"),
            _sample("g1", 10, camera=2, split="gallery"),
        ],
    )
    ok.validate()

    dup = DatasetManifest(name="d", samples=[_sample("a", 1), _sample("a", 2)])
    with pytest.raises(IngestError, match="duplicate"):
        dup.validate()

    weird = DatasetManifest(name="d", samples=[_sample("a", 1, split="val")])
    with pytest.raises(IngestError, match="unknown split"):
        weird.validate()

    overlap = DatasetManifest(
        name="d",
        samples=[_sample("a", 5), _sample("q", 5, split="query"),
                 _sample("g", 5, camera=2, split="gallery")],
    )
    with pytest.raises(IngestError, match="overlap"):
        overlap.validate()

    orphan = DatasetManifest(
        name="d",
        samples=[_sample("a", 1), _sample("q", 9, split="query"),
                 _sample("g", 8, split="gallery")],
    )
    with pytest.raises(IngestError, match="missing from gallery"):
        orphan.validate()

    # junk and distractor ids never trip the protocol checks
    junky = DatasetManifest(
        name="d",
        samples=[_sample("a", 0), _sample("b", -1, split="gallery"),
                 _sample("q", 4, split="query"), _sample("g", 4, camera=2, split="gallery"),
                 _sample("h", 0, split="query"), _sample("i", 0, camera=2, split="gallery")],
    )
    junky.validate()


def test_manifest_roundtrip(tmp_path):
    m = DatasetManifest(
        name="roundtrip",
        samples=[_sample("a", 1), _sample("q", 7, split="query"),
                 _sample("g", 7, camera=2, split="gallery")],
        graph_store_path="/tmp/graphs",
    )
    path = tmp_path / "manifest.json"
    m.save(path)
    back = DatasetManifest.load(path)
    assert back == m
    assert back.counts() == {"train": 1, "query": 1, "gallery": 1}
    assert back.num_train_identities == 1

    doc = json.loads(path.read_text())
    doc["samples"].append(doc["samples"][0])  # duplicate id
    path.write_text(json.dumps(doc))
    with pytest.raises(IngestError):
        DatasetManifest.load(path)


def _write_tree(root, files):
    for split, names in files.items():
        d = root / SPLIT_DIRS[split]
        d.mkdir(parents=True, exist_ok=True)
        for n in names:
            Image.new("RGB", (16, 32), (120, 50, 50)).save(d / n)


def test_ingest_market_tree(tmp_path, caplog):
    _write_tree(
        tmp_path,
        {
            "train": ["0001_c1s1_000001_00.jpg", "0001_c2s1_000002_00.jpg"],
            "query": ["0100_c1s1_000003_00.jpg"],
            "gallery": ["0100_c2s1_000004_00.jpg", "-1_c1s1_000005_00.jpg",
                        "0000_c3s1_000006_00.jpg"],
        },
    )
    with caplog.at_level(logging.WARNING):
        manifest = ingest(tmp_path, "market1501")
    assert manifest.counts() == {"train": 2, "query": 1, "gallery": 3}
    assert manifest.identities("gallery") == {100, -1, 0}
    assert "full corpus" in caplog.text  # subset sizes warn, never fail
    ids = [s.image_id for s in manifest.split_samples("gallery")]
    assert ids == sorted(ids)


def test_ingest_rejects_broken_trees(tmp_path):
    with pytest.raises(IngestError, match="missing directory"):
        ingest(tmp_path / "nowhere", "synthetic")

    _write_tree(tmp_path, {
        "train": ["0001_c1s1_000001_00.jpg"],
        "query": ["0002_c1s1_000002_00.jpg"],
        "gallery": ["0002_c2s1_000003_00.jpg"],
    })
    (tmp_path / SPLIT_DIRS["train"] / "notes.txt").write_text("ignored")
    manifest = ingest(tmp_path, "market1501")  # non-image files are skipped
    assert manifest.counts()["train"] == 1

    overlap = tmp_path / "leaky"
    _write_tree(overlap, {
        "train": ["0002_c1s1_000001_00.jpg"],
        "query": ["0002_c1s1_000002_00.jpg"],
        "gallery": ["0002_c2s1_000003_00.jpg"],
    })
    with pytest.raises(IngestError, match="overlap"):
        ingest(overlap, "market1501")


def test_graph_store(tmp_path):
    store = GraphStore(tmp_path / "graphs")
    doc = json.dumps(
        {"nodes": [{"id": "person", "attributes": ["tall"]}], "edges": []}
    )
    assert not store.has("img1")
    store.put_text("img1", doc)
    assert store.has("img1")
    g = store.get("img1")
    assert g.source_image_id == "img1"
    assert g.nodes[0].attributes == ["tall"]

    store.put("img2", g)
    assert store.ids() == ["img1", "img2"]
    with pytest.raises(KeyError):
        store.get("img3")
    with pytest.raises(ParseFailure):
        store.put_text("img4", "{broken")
    assert not store.has("img4")


def test_synthetic_dataset_properties(synth_root, small_components):
    root, manifest = synth_root
    assert manifest.name == "synthetic"
    assert manifest.counts() == {"train": 80, "query": 32, "gallery": 48}
    assert manifest.identities("train") == set(range(1, 9))
    assert manifest.identities("query") == set(range(101, 109))
    assert manifest.identities("query") <= manifest.identities("gallery")
    assert manifest.identities("train").isdisjoint(manifest.identities("gallery"))
    # both cameras appear for every identity, so cross-camera eval has positives
    for split in ("query", "gallery"):
        for s in manifest.split_samples(split):
            assert s.camera in (1, 2)
    for pid in manifest.identities("query"):
        cams = {s.camera for s in manifest.samples if s.identity == pid}
        assert cams == {1, 2}

    # every sample has an image on disk and a stored parseable graph
    store = small_components.graph_store
    for s in manifest.samples[::7]:
        with Image.open(s.image_path) as img:
            assert img.size == (32, 64)
        g = store.get(s.image_id)
        assert any(n.id == "person" for n in g.nodes)

    reloaded = DatasetManifest.load(root / "manifest.json")
    assert reloaded == manifest


def test_synthetic_dataset_is_seed_deterministic(tmp_path):
    m1 = generate_synthetic_dataset(tmp_path / "a", n_train_ids=2, n_test_ids=2,
                                    images_per_id=4, queries_per_id=2, seed=5)
    m2 = generate_synthetic_dataset(tmp_path / "b", n_train_ids=2, n_test_ids=2,
                                    images_per_id=4, queries_per_id=2, seed=5)
    assert [s.image_id for s in m1.samples] == [s.image_id for s in m2.samples]
    for s1, s2 in zip(m1.samples, m2.samples):
        a = np.asarray(Image.open(s1.image_path))
        b = np.asarray(Image.open(s2.image_path))
        assert np.array_equal(a, b)
    g1 = (tmp_path / "a" / "graphs").glob("*.json")
    for p in g1:
        q = tmp_path / "b" / "graphs" / p.name
        assert p.read_text() == q.read_text()

    m3 = generate_synthetic_dataset(tmp_path / "c", n_train_ids=2, n_test_ids=2,
                                    images_per_id=4, queries_per_id=2, seed=6)
    changed = any(
        not np.array_equal(
            np.asarray(Image.open(s1.image_path)), np.asarray(Image.open(s3.image_path))
        )
        for s1, s3 in zip(m1.samples, m3.samples)
    )
    assert changed


def test_synthetic_graphs_vary_within_identity(synth_root):
    _, manifest = synth_root
    store = GraphStore(synth_root[0] / "graphs")
    by_id: dict[int, list[str]] = {}
    for s in manifest.split_samples("train"):
        by_id.setdefault(s.identity, []).append(s.image_id)
    texts = [store._path(i).read_text() for i in by_id[1]]
    assert len(set(texts)) > 1  # per-image jitter drops attributes sometimes
