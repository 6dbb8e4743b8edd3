"""Dataset plumbing: person samples, manifests with protocol invariants,
market-style directory ingestion, the on-disk graph store, and a fully seeded
synthetic dataset generator so every stage runs without downloads.

A dataset root follows the common re-id layout:

    <root>/bounding_box_train/   training images
    <root>/query/                query images
    <root>/bounding_box_test/    gallery images

Filenames carry identity and camera: ``0473_c4s2_050698_00.jpg`` means person
473 seen by camera 4 (identity -1 marks junk detections, 0 background
distractors). Manifests enforce the retrieval protocol: train and evaluation
identities must be disjoint, and every query identity must appear in the
gallery.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .scenegraph import SceneGraph, parse_scene_graph
from .textembed import EmbedClient
from .visual import BackboneAdapter

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
SPLIT_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")

# Published full-corpus sizes; ingestion only warns when a tree is a subset.
EXPECTED_COUNTS = {
    "market1501": {"train": 12936, "query": 3368, "gallery": 19732},
    "cuhk03np": {"train": 7365, "query": 1400, "gallery": 5332},
}

_MARKET_RE = re.compile(
    r"^(-?\d+)_c(\d+)s\d+_\d+_\d+\.(?:jpg|jpeg|png)$", re.IGNORECASE
)
_PREFIX_RE = re.compile(r"^(-?\d+)_c(\d+)")


class FilenameFormat(ValueError):
    """Image filename does not follow the expected naming convention."""


class IngestError(ValueError):
    """Dataset tree or manifest violates the ingestion contract."""


def parse_market_filename(name: str) -> tuple[int, int]:
    """(identity, camera) from a market-style filename; strict full pattern."""
    m = _MARKET_RE.match(name)
    if not m:
        raise FilenameFormat(f"not a market-style filename: {name!r}")
    return int(m.group(1)), int(m.group(2))


def parse_prefix_filename(name: str) -> tuple[int, int]:
    """(identity, camera) from the laxer ``<pid>_c<cam>`` prefix convention."""
    m = _PREFIX_RE.match(name)
    if not m:
        raise FilenameFormat(f"no <pid>_c<cam> prefix in filename: {name!r}")
    return int(m.group(1)), int(m.group(2))


@dataclass
class PersonSample:
    image_path: str
    identity: int
    camera: int
    split: str
    image_id: str


@dataclass
class DatasetManifest:
    name: str
    samples: list[PersonSample]
    graph_store_path: str = ""
    feature_store_path: str = ""

    def split_samples(self, split: str) -> list[PersonSample]:
        return [s for s in self.samples if s.split == split]

    def identities(self, split: str) -> set[int]:
        return {s.identity for s in self.samples if s.split == split}

    def counts(self) -> dict[str, int]:
        out = {split: 0 for split in SPLITS}
        for s in self.samples:
            out[s.split] += 1
        return out

    @property
    def num_train_identities(self) -> int:
        return len(self.identities("train"))

    def validate(self) -> None:
        """Protocol invariants; raises IngestError on violation."""
        seen: set[str] = set()
        for s in self.samples:
            if s.split not in SPLITS:
                raise IngestError(f"sample {s.image_id}: unknown split {s.split!r}")
            if s.image_id in seen:
                raise IngestError(f"duplicate image id {s.image_id!r}")
            seen.add(s.image_id)
        train_ids = {i for i in self.identities("train") if i > 0}
        eval_ids = {
            i for i in self.identities("query") | self.identities("gallery") if i > 0
        }
        overlap = train_ids & eval_ids
        if overlap:
            raise IngestError(
                f"train/test identity overlap: {sorted(overlap)[:5]}"
                f"{'...' if len(overlap) > 5 else ''}"
            )
        query_ids = {i for i in self.identities("query") if i > 0}
        missing = query_ids - self.identities("gallery")
        if missing:
            raise IngestError(
                f"query identities missing from gallery: {sorted(missing)[:5]}"
            )

    def to_document(self) -> dict:
        return {
            "name": self.name,
            "graph_store_path": self.graph_store_path,
            "feature_store_path": self.feature_store_path,
            "counts": self.counts(),
            "samples": [
                {
                    "image_path": s.image_path,
                    "identity": s.identity,
                    "camera": s.camera,
                    "split": s.split,
                    "image_id": s.image_id,
                }
                for s in self.samples
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_document(), indent=2), encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        manifest = cls(
            name=doc["name"],
            samples=[PersonSample(**s) for s in doc["samples"]],
            graph_store_path=doc.get("graph_store_path", ""),
            feature_store_path=doc.get("feature_store_path", ""),
        )
        manifest.validate()
        return manifest


def ingest(root: str | Path, dataset: str) -> DatasetManifest:
    """Build a manifest from a market-style directory tree.

    ``dataset`` picks the filename convention ("market1501" strict pattern,
    "cuhk03np" or "synthetic" prefix pattern). Count mismatches against the
    published full-corpus sizes only warn (desk-scale subsets are expected);
    protocol violations are hard errors.
    """
    root = Path(root)
    parser = parse_market_filename if dataset == "market1501" else parse_prefix_filename
    samples: list[PersonSample] = []
    for split in SPLITS:
        split_dir = root / SPLIT_DIRS[split]
        if not split_dir.is_dir():
            raise IngestError(f"missing directory {split_dir}")
        names = sorted(
            p.name for p in split_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        for name in names:
            identity, camera = parser(name)
            samples.append(
                PersonSample(
                    image_path=str(split_dir / name),
                    identity=identity,
                    camera=camera,
                    split=split,
                    image_id=Path(name).stem,
                )
            )
    manifest = DatasetManifest(name=dataset, samples=samples)
    manifest.validate()
    expected = EXPECTED_COUNTS.get(dataset)
    if expected:
        actual = manifest.counts()
        for split, want in expected.items():
            if actual[split] != want:
                logger.warning(
                    "%s %s split has %d images, full corpus has %d",
                    dataset,
                    split,
                    actual[split],
                    want,
                )
    return manifest


# ---------------------------------------------------------------------------
# Graph store


class GraphStore:
    """One scene-graph document per image id, stored as <id>.json."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, image_id: str) -> Path:
        return self.root / f"{image_id}.json"

    def has(self, image_id: str) -> bool:
        return self._path(image_id).exists()

    def put(self, image_id: str, graph: SceneGraph) -> None:
        self._path(image_id).write_text(graph.to_json() + "\n", encoding="utf-8")

    def put_text(self, image_id: str, document: str) -> None:
        parse_scene_graph(document)  # refuse to store an invalid document
        self._path(image_id).write_text(document, encoding="utf-8")

    def get(self, image_id: str) -> SceneGraph:
        path = self._path(image_id)
        if not path.exists():
            raise KeyError(f"no stored scene graph for image {image_id!r}")
        return parse_scene_graph(path.read_text(encoding="utf-8"), source_image_id=image_id)

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.json"))


@dataclass
class Components:
    """The pluggable services a training or evaluation run needs."""

    graph_store: GraphStore
    embed_client: EmbedClient
    backbone: BackboneAdapter
    strict_person: bool = False


# ---------------------------------------------------------------------------
# Synthetic dataset


_COLORS = (
    "red", "blue", "green", "black", "white",
    "yellow", "purple", "orange", "gray", "brown",
)
_GARMENTS = ("jacket", "shirt", "coat", "dress", "hoodie")
_LEGWEAR = ("jeans", "shorts", "skirt", "trousers")
_ITEMS = ("backpack", "handbag", "umbrella", "suitcase", "bicycle")
_HAIR = ("short hair", "long hair", "curly hair")
_ITEM_RELATIONS = ("carries", "holds", "pushes")

SYNTH_IMAGE_SIZE = (64, 32)  # (height, width); upscaled from an 8x4 block grid
_PATTERN_ROWS, _PATTERN_COLS = 8, 4


@dataclass
class _IdentityDesign:
    pattern: np.ndarray  # (_PATTERN_ROWS, _PATTERN_COLS, 3) in [0,1]
    person_attrs: list[str]
    item: str
    item_attrs: list[str]
    relation: str


def _design_identity(rng: np.random.Generator, used_combos: set[tuple]) -> _IdentityDesign:
    while True:
        attrs = (
            f"{rng.choice(_COLORS)} {rng.choice(_GARMENTS)}",
            f"{rng.choice(_COLORS)} {rng.choice(_LEGWEAR)}",
            str(rng.choice(_HAIR)),
        )
        item = str(rng.choice(_ITEMS))
        item_color = str(rng.choice(_COLORS))
        combo = attrs + (item, item_color)
        if combo not in used_combos:
            used_combos.add(combo)
            break
    return _IdentityDesign(
        pattern=rng.uniform(0.0, 1.0, size=(_PATTERN_ROWS, _PATTERN_COLS, 3)),
        person_attrs=list(attrs),
        item=item,
        item_attrs=[item_color],
        relation=str(rng.choice(_ITEM_RELATIONS)),
    )


def _render_image(design: _IdentityDesign, rng: np.random.Generator) -> Image.Image:
    h, w = SYNTH_IMAGE_SIZE
    scale_h, scale_w = h // _PATTERN_ROWS, w // _PATTERN_COLS
    base = np.kron(design.pattern, np.ones((scale_h, scale_w, 1)))
    jittered = base + rng.normal(0.0, 0.02, size=base.shape) + rng.uniform(-0.04, 0.04)
    pixels = (np.clip(jittered, 0.0, 1.0) * 255).astype(np.uint8)
    return Image.fromarray(pixels, mode="RGB")


def _identity_graph(design: _IdentityDesign, rng: np.random.Generator) -> SceneGraph:
    person_attrs = list(design.person_attrs)
    if len(person_attrs) > 2 and rng.random() < 0.2:
        drop = int(rng.integers(len(person_attrs)))
        person_attrs = person_attrs[:drop] + person_attrs[drop + 1 :]
    doc = {
        "nodes": [
            {"id": "person", "attributes": person_attrs},
            {"id": design.item, "attributes": list(design.item_attrs)},
        ],
        "edges": [
            {"source": "person", "target": design.item, "relation": design.relation}
        ],
    }
    return parse_scene_graph(json.dumps(doc))


def generate_synthetic_dataset(
    root: str | Path,
    n_train_ids: int = 8,
    n_test_ids: int = 8,
    images_per_id: int = 10,
    queries_per_id: int = 4,
    seed: int = 7,
) -> DatasetManifest:
    """Seeded synthetic corpus: per-identity color-block patterns with
    per-image jitter, template scene graphs with a unique attribute combo per
    identity, alternating cameras, and a disjoint held-out identity group
    split into query/gallery. Writes images, graphs, and manifest.json under
    ``root`` and returns the manifest.
    """
    if queries_per_id >= images_per_id:
        raise ValueError("queries_per_id must leave gallery images")
    root = Path(root)
    rng = np.random.default_rng(seed)
    store = GraphStore(root / "graphs")
    for split_dir in SPLIT_DIRS.values():
        (root / split_dir).mkdir(parents=True, exist_ok=True)

    used_combos: set[tuple] = set()
    samples: list[PersonSample] = []

    def emit(pid: int, is_train: bool) -> None:
        design = _design_identity(rng, used_combos)
        for img_idx in range(images_per_id):
            camera = 1 + (img_idx % 2)
            if is_train:
                split = "train"
            else:
                split = "query" if img_idx < queries_per_id else "gallery"
            name = f"{pid:04d}_c{camera}s1_{img_idx:06d}_00.png"
            path = root / SPLIT_DIRS[split] / name
            _render_image(design, rng).save(path)
            image_id = Path(name).stem
            store.put(image_id, _identity_graph(design, rng))
            samples.append(
                PersonSample(
                    image_path=str(path),
                    identity=pid,
                    camera=camera,
                    split=split,
                    image_id=image_id,
                )
            )

    for pid in range(1, n_train_ids + 1):
        emit(pid, is_train=True)
    for pid in range(101, 101 + n_test_ids):
        emit(pid, is_train=False)

    manifest = DatasetManifest(
        name="synthetic",
        samples=samples,
        graph_store_path=str(root / "graphs"),
    )
    manifest.validate()
    manifest.save(root / "manifest.json")
    return manifest
