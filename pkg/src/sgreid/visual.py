"""Image preprocessing and pluggable visual backbones.

Images are decoded, resized to 252x126 (both multiples of the 14-pixel ViT
patch size), and scaled to [0,1]. The backbone is an opaque vector producer
behind the ``BackboneAdapter`` protocol:

* ``StubBackbone``: deterministic seeded random projection of 14x downsampled
  pixels to a 768-dim unit vector. No pretrained weights, fully offline, and
  locally sensitive enough that distinct synthetic identities stay separable.
* ``FixtureBackbone``: replays recorded per-image vectors (directory with a
  manifest naming the backbone, its dimension, and the preprocessing
  contract version).

No data augmentation anywhere: features are a pure function of the image.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

IMAGE_HEIGHT = 252
IMAGE_WIDTH = 126
PATCH = 14
PREPROCESS_VERSION = "resize-bilinear-252x126-v1"


class DecodeError(ValueError):
    """Bytes that cannot be decoded as an image."""


class BackboneUnavailable(RuntimeError):
    """The backbone cannot produce a feature for this image."""


def preprocess(data: bytes) -> np.ndarray:
    """Decode image bytes to a (252, 126, 3) float64 tensor in [0,1]."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            rgb = img.convert("RGB").resize(
                (IMAGE_WIDTH, IMAGE_HEIGHT), Image.Resampling.BILINEAR
            )
    except Exception as exc:
        raise DecodeError(f"cannot decode image bytes: {exc}") from None
    return np.asarray(rgb, dtype=np.float64) / 255.0


class BackboneAdapter(Protocol):
    name: str
    dim: int

    def encode(self, tensor: np.ndarray, image_id: str | None = None) -> np.ndarray: ...


def _check_tensor(tensor: np.ndarray) -> None:
    if tensor.shape != (IMAGE_HEIGHT, IMAGE_WIDTH, 3):
        raise ValueError(
            f"expected ({IMAGE_HEIGHT}, {IMAGE_WIDTH}, 3) image tensor, got {tensor.shape}"
        )


class StubBackbone:
    """Seeded random projection of patch-averaged pixels, L2-normalized."""

    name = "stub-random-projection"

    def __init__(self, dim: int = 768, seed: int = 0):
        self.dim = dim
        self.seed = seed
        pooled_len = (IMAGE_HEIGHT // PATCH) * (IMAGE_WIDTH // PATCH) * 3
        rng = np.random.default_rng(seed)
        self._projection = rng.standard_normal((dim, pooled_len)) / np.sqrt(pooled_len)

    def encode(self, tensor: np.ndarray, image_id: str | None = None) -> np.ndarray:
        _check_tensor(tensor)
        hp, wp = IMAGE_HEIGHT // PATCH, IMAGE_WIDTH // PATCH
        pooled = tensor.reshape(hp, PATCH, wp, PATCH, 3).mean(axis=(1, 3))
        v = self._projection @ pooled.ravel()
        norm = np.linalg.norm(v)
        return v / max(norm, 1e-12)

    def manifest(self) -> dict:
        return {"name": self.name, "dim": self.dim, "preprocess": PREPROCESS_VERSION}


class FixtureBackbone:
    """Replays recorded image-id -> vector features.

    Layout: ``<root>/manifest.json`` with name/dim/preprocess, and
    ``<root>/features.npz`` keyed by image id.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise BackboneUnavailable(f"no backbone manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        self.name = manifest["name"]
        self.dim = int(manifest["dim"])
        self.preprocess_version = manifest.get("preprocess", "")
        self._features = np.load(self.root / "features.npz")

    def encode(self, tensor: np.ndarray, image_id: str | None = None) -> np.ndarray:
        if image_id is None or image_id not in self._features:
            raise BackboneUnavailable(f"no recorded feature for image {image_id!r}")
        return np.asarray(self._features[image_id], dtype=np.float64)

    def manifest(self) -> dict:
        return {"name": self.name, "dim": self.dim, "preprocess": self.preprocess_version}


@dataclass
class FeatureStoreWriter:
    """Accumulates features and writes a FixtureBackbone-compatible store."""

    root: Path
    name: str
    dim: int
    preprocess_version: str = PREPROCESS_VERSION

    def __post_init__(self):
        self.root = Path(self.root)
        self._pending: dict[str, np.ndarray] = {}

    def add(self, image_id: str, feature: np.ndarray) -> None:
        self._pending[image_id] = np.asarray(feature, dtype=np.float64)

    def flush(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "manifest.json").write_text(
            json.dumps(
                {"name": self.name, "dim": self.dim, "preprocess": self.preprocess_version},
                indent=2,
            ),
            encoding="utf-8",
        )
        np.savez(self.root / "features.npz", **self._pending)


def encode_image(
    tensor: np.ndarray, adapter: BackboneAdapter, image_id: str | None = None
) -> np.ndarray:
    """Run the adapter; validates the tensor and the returned vector."""
    _check_tensor(tensor)
    v = np.asarray(adapter.encode(tensor, image_id=image_id), dtype=np.float64)
    if v.shape != (adapter.dim,):
        raise ValueError(f"adapter returned shape {v.shape}, expected ({adapter.dim},)")
    if not np.all(np.isfinite(v)):
        raise ValueError("adapter returned non-finite feature")
    return v
