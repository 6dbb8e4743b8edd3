"""Fusion of visual and graph features into the 128-dim identity embedding,
plus the batch-norm neck and train-only linear classifier.

The neck follows the strong-baseline split: metric losses (triplet, center)
read the pre-BN fused feature, the identity cross-entropy reads logits from
the post-BN feature, and retrieval always uses the post-BN feature
L2-normalized at record creation. The classifier has no bias term.

Ablations run the same code path: ``fusion_mode`` picks which branch blocks
are concatenated before the linear map ("joint", "visual_only", or
"graph_only").
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gat import ShapeMismatch

EMBED_OUT_DIM = 128
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

FUSION_MODES = ("joint", "visual_only", "graph_only")


@dataclass
class FusionParams:
    weight: np.ndarray  # (out_dim, in_dim) over the concatenated input
    bias: np.ndarray  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def fusion_input_dim(visual_dim: int, graph_dim: int, mode: str) -> int:
    if mode == "joint":
        return visual_dim + graph_dim
    if mode == "visual_only":
        return visual_dim
    if mode == "graph_only":
        return graph_dim
    raise ValueError(f"fusion mode must be one of {FUSION_MODES}, not {mode!r}")


def init_fusion_params(
    rng: np.random.Generator, in_dim: int, out_dim: int = EMBED_OUT_DIM
) -> FusionParams:
    bound = 1.0 / np.sqrt(in_dim)
    return FusionParams(
        weight=rng.uniform(-bound, bound, size=(out_dim, in_dim)),
        bias=np.zeros(out_dim),
    )


def fusion_input(
    visual: np.ndarray | None, graph: np.ndarray | None, mode: str
) -> np.ndarray:
    """Assemble the (B, in_dim) input block for the configured mode."""
    if mode == "joint":
        if visual is None or graph is None:
            raise ShapeMismatch("joint fusion needs both branches")
        return np.concatenate([visual, graph], axis=1)
    if mode == "visual_only":
        if visual is None:
            raise ShapeMismatch("visual_only fusion needs the visual branch")
        return np.asarray(visual)
    if mode == "graph_only":
        if graph is None:
            raise ShapeMismatch("graph_only fusion needs the graph branch")
        return np.asarray(graph)
    raise ValueError(f"fusion mode must be one of {FUSION_MODES}, not {mode!r}")


def fuse_batch(
    params: FusionParams, inputs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Linear map of the assembled input; returns (features, cache)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != params.in_dim:
        raise ShapeMismatch(
            f"fusion input {inputs.shape} incompatible with weight {params.weight.shape}"
        )
    return inputs @ params.weight.T + params.bias, inputs


def fuse_batch_backward(
    params: FusionParams, cache: np.ndarray, grad_out: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    grads = {
        "weight": grad_out.T @ cache,
        "bias": grad_out.sum(axis=0),
    }
    return grads, grad_out @ params.weight


def fuse(visual: np.ndarray, graph: np.ndarray, params: FusionParams) -> np.ndarray:
    """Single-sample joint fusion: weight @ concat(v, g) + bias."""
    x = np.concatenate([np.asarray(visual), np.asarray(graph)])
    if x.shape[0] != params.in_dim:
        raise ShapeMismatch(
            f"concatenated input dim {x.shape[0]} != fusion in_dim {params.in_dim}"
        )
    return params.weight @ x + params.bias


# ---------------------------------------------------------------------------
# Batch-norm neck + classifier


@dataclass
class HeadParams:
    bn_gain: np.ndarray  # (D,)
    bn_bias: np.ndarray  # (D,)
    bn_running_mean: np.ndarray  # (D,)
    bn_running_var: np.ndarray  # (D,)
    w_cls: np.ndarray  # (P, D), no bias

    @property
    def dim(self) -> int:
        return self.bn_gain.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[0]


def init_head_params(
    rng: np.random.Generator, num_classes: int, dim: int = EMBED_OUT_DIM
) -> HeadParams:
    bound = 1.0 / np.sqrt(dim)
    return HeadParams(
        bn_gain=np.ones(dim),
        bn_bias=np.zeros(dim),
        bn_running_mean=np.zeros(dim),
        bn_running_var=np.ones(dim),
        w_cls=rng.uniform(-bound, bound, size=(num_classes, dim)),
    )


@dataclass
class HeadCache:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    bn_out: np.ndarray


def head_forward(
    features: np.ndarray,
    params: HeadParams,
    mode: str = "train",
    update_running: bool = True,
) -> tuple[np.ndarray, np.ndarray | None, HeadCache | None]:
    """Batch-norm neck, then (train mode only) classifier logits.

    Train mode normalizes with in-batch statistics (population variance) and,
    unless ``update_running`` is off, folds them into the running buffers with
    momentum BN_MOMENTUM. Eval mode uses the running buffers and emits no
    logits. Returns (bn_features, logits_or_None, cache_or_None).
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != params.dim:
        raise ShapeMismatch(f"head input {f.shape} incompatible with dim {params.dim}")
    if mode == "train":
        mean = f.mean(axis=0)
        var = f.var(axis=0)
        if update_running:
            params.bn_running_mean[...] = (
                (1 - BN_MOMENTUM) * params.bn_running_mean + BN_MOMENTUM * mean
            )
            params.bn_running_var[...] = (
                (1 - BN_MOMENTUM) * params.bn_running_var + BN_MOMENTUM * var
            )
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (f - mean) * inv_std
        bn_out = params.bn_gain * xhat + params.bn_bias
        logits = bn_out @ params.w_cls.T
        return bn_out, logits, HeadCache(x=f, xhat=xhat, inv_std=inv_std, bn_out=bn_out)
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(params.bn_running_var + BN_EPS)
        bn_out = params.bn_gain * (f - params.bn_running_mean) * inv_std + params.bn_bias
        return bn_out, None, None
    raise ValueError(f"mode must be train or eval, not {mode!r}")


def head_backward(
    params: HeadParams, cache: HeadCache, grad_logits: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backward of train-mode head_forward given d loss / d logits.

    Returns (grads for bn_gain/bn_bias/w_cls, grad wrt the pre-BN features).
    Uses the full batch-statistics chain rule, so gradients flowing through
    the batch mean/variance are included.
    """
    d_w_cls = grad_logits.T @ cache.bn_out
    d_bn_out = grad_logits @ params.w_cls
    d_gain = np.sum(d_bn_out * cache.xhat, axis=0)
    d_bias = d_bn_out.sum(axis=0)
    d_xhat = d_bn_out * params.bn_gain
    b = cache.x.shape[0]
    d_x = (
        cache.inv_std
        / b
        * (b * d_xhat - d_xhat.sum(axis=0) - cache.xhat * np.sum(d_xhat * cache.xhat, axis=0))
    )
    return {"bn_gain": d_gain, "bn_bias": d_bias, "w_cls": d_w_cls}, d_x


# ---------------------------------------------------------------------------
# Embedding records


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(norm, 1e-12)


@dataclass
class EmbeddingRecord:
    image_id: str
    label: int
    camera: int
    feature: np.ndarray  # (D,), post-BN, unit L2 norm
    split: str = ""

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)


def make_embedding_record(
    image_id: str, label: int, camera: int, bn_feature: np.ndarray, split: str = ""
) -> EmbeddingRecord:
    return EmbeddingRecord(
        image_id=image_id,
        label=label,
        camera=camera,
        feature=l2_normalize(np.asarray(bn_feature, dtype=np.float64)),
        split=split,
    )


def save_records(path: str | Path, records: list[EmbeddingRecord]) -> None:
    """Binary table: aligned arrays of ids, labels, cameras, features, splits."""
    np.savez(
        Path(path),
        image_ids=np.array([r.image_id for r in records]),
        labels=np.array([r.label for r in records], dtype=np.int64),
        cameras=np.array([r.camera for r in records], dtype=np.int64),
        features=np.stack([r.feature for r in records])
        if records
        else np.zeros((0, EMBED_OUT_DIM)),
        splits=np.array([r.split for r in records]),
    )


def load_records(path: str | Path) -> list[EmbeddingRecord]:
    data = np.load(Path(path), allow_pickle=False)
    return [
        EmbeddingRecord(
            image_id=str(data["image_ids"][i]),
            label=int(data["labels"][i]),
            camera=int(data["cameras"][i]),
            feature=data["features"][i],
            split=str(data["splits"][i]),
        )
        for i in range(len(data["image_ids"]))
    ]
