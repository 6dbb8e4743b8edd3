"""Training: PK-sampled batches, warm-up learning-rate schedule, a hand-rolled
Adam, per-step metric logging, and resumable per-epoch checkpoints.

The trainable model is the graph encoder + fusion linear + batch-norm neck
with classifier; the center table is updated by its own SGD step (see losses).
Everything runs in float64 and is deterministic given the config seed: two
runs with the same seed produce byte-identical metrics logs, and resuming from
a checkpoint continues the exact same trajectory (the sampling RNG state is
stored in the checkpoint manifest).

Checkpoint layout: ``<workdir>/ckpt/epoch_<n>/`` holding ``params.npz`` (all
tensors, buffers, centers), ``optimizer.npz`` (Adam moments and step count),
and ``manifest.json`` (epoch, seed, dims, dataset name, train identities, RNG
state, config snapshot, kernel backend).

Metrics log: ``<workdir>/metrics.csv`` with one row per step:
``step,epoch,lr,loss_triplet,loss_center,loss_id,loss_total`` (floats written
with repr so equal runs compare byte-equal).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .data import Components, DatasetManifest, PersonSample
from .fusion import (
    FusionParams,
    HeadParams,
    fuse_batch,
    fuse_batch_backward,
    fusion_input,
    fusion_input_dim,
    head_backward,
    head_forward,
    init_fusion_params,
    init_head_params,
)
from .gat import (
    GraphEncoderParams,
    encode_graphs,
    encode_graphs_backward,
    encoder_param_dict,
    init_encoder_params,
)
from .losses import (
    CenterTable,
    center_loss_with_grad,
    combined_loss,
    id_loss_with_grad,
    init_center_table,
    triplet_batch_hard_with_grad,
)
from .scenegraph import expand_attributes, reverse_flow
from .textembed import NumericGraph, numerify_graph
from .visual import encode_image, preprocess

logger = logging.getLogger(__name__)

METRICS_HEADER = "step,epoch,lr,loss_triplet,loss_center,loss_id,loss_total"


class InsufficientIdentities(ValueError):
    """Fewer identities available than a PK batch needs."""


class IdentityOverlap(ValueError):
    """Train and evaluation splits share person identities."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    instances_per_id: int = 4
    epochs: int = 120
    base_lr: float = 0.00035
    warmup_epochs: int = 10
    decay_epochs: tuple[int, int] = (40, 70)
    seed: int = 42
    lambda_center: float = 0.0005
    margin: float = 0.3
    smoothing: float = 0.1
    center_lr: float = 0.5
    hidden_dim: int = 384
    out_dim: int = 128
    negative_slope: float = 0.2
    fusion_mode: str = "joint"

    def __post_init__(self):
        if self.batch_size % self.instances_per_id != 0:
            raise ValueError("batch_size must be divisible by instances_per_id")
        if self.instances_per_id < 2:
            raise ValueError("instances_per_id must be >= 2 to form triplets")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Warm-up then step-decay schedule.

    Linear ramp from base/100 to base across the warm-up epochs, base until
    the first decay epoch, base/10 until the second, base/100 afterwards.
    """
    if epoch < 1 or epoch > cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    base = cfg.base_lr
    floor = base / 100.0
    w = cfg.warmup_epochs
    if epoch <= w:
        if w <= 1:
            return base
        return floor + (base - floor) * (epoch - 1) / (w - 1)
    d1, d2 = cfg.decay_epochs
    if epoch <= d1:
        return base
    if epoch <= d2:
        return base / 10.0
    return base / 100.0


def pk_sample(
    index: Mapping[int, Sequence[int]],
    batch_size: int,
    instances_per_id: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample a PK batch: batch_size/instances_per_id distinct identities,
    instances_per_id samples each (with replacement only when an identity has
    fewer images than that). Returns sample indices, identity-grouped."""
    if batch_size % instances_per_id != 0:
        raise ValueError("batch_size must be divisible by instances_per_id")
    num_ids = batch_size // instances_per_id
    labels = sorted(index)
    if len(labels) < num_ids:
        raise InsufficientIdentities(
            f"need {num_ids} identities per batch, only {len(labels)} available"
        )
    chosen = rng.choice(len(labels), size=num_ids, replace=False)
    out: list[int] = []
    for pos in chosen:
        pool = index[labels[int(pos)]]
        replace = len(pool) < instances_per_id
        picks = rng.choice(len(pool), size=instances_per_id, replace=replace)
        out.extend(pool[int(p)] for p in picks)
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# Model assembly


@dataclass
class ReidModel:
    encoder: GraphEncoderParams
    fusion: FusionParams
    head: HeadParams
    centers: CenterTable
    fusion_mode: str
    visual_dim: int


def init_model(
    rng: np.random.Generator,
    num_classes: int,
    visual_dim: int,
    node_dim: int = 384,
    hidden_dim: int = 384,
    out_dim: int = 128,
    edge_dim: int | None = None,
    fusion_mode: str = "joint",
    negative_slope: float = 0.2,
) -> ReidModel:
    encoder = init_encoder_params(
        rng,
        node_dim=node_dim,
        hidden_dim=hidden_dim,
        out_dim=out_dim,
        edge_dim=edge_dim,
        negative_slope=negative_slope,
    )
    fusion = init_fusion_params(
        rng, fusion_input_dim(visual_dim, out_dim, fusion_mode), out_dim
    )
    head = init_head_params(rng, num_classes, out_dim)
    centers = init_center_table(rng, num_classes, out_dim)
    return ReidModel(
        encoder=encoder,
        fusion=fusion,
        head=head,
        centers=centers,
        fusion_mode=fusion_mode,
        visual_dim=visual_dim,
    )


def model_param_dict(model: ReidModel) -> dict[str, np.ndarray]:
    """References to every Adam-trained tensor (centers excluded: own step)."""
    d = {f"encoder.{k}": v for k, v in encoder_param_dict(model.encoder).items()}
    d["fusion.weight"] = model.fusion.weight
    d["fusion.bias"] = model.fusion.bias
    d["head.bn_gain"] = model.head.bn_gain
    d["head.bn_bias"] = model.head.bn_bias
    d["head.w_cls"] = model.head.w_cls
    return d


def model_buffer_dict(model: ReidModel) -> dict[str, np.ndarray]:
    return {
        "head.bn_running_mean": model.head.bn_running_mean,
        "head.bn_running_var": model.head.bn_running_var,
        "centers": model.centers.centers,
    }


@dataclass
class StepLosses:
    triplet: float
    center: float
    ident: float
    total: float


def train_step(
    model: ReidModel,
    graphs: Sequence[NumericGraph],
    visual_feats: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> tuple[StepLosses, dict[str, np.ndarray], np.ndarray]:
    """One forward/backward pass over a PK batch.

    Returns (losses, gradients keyed like model_param_dict, center-table
    gradient). Metric losses read the pre-BN fused feature, the identity loss
    reads the post-BN logits, matching the neck design.
    """
    use_graphs = model.fusion_mode != "visual_only"
    if use_graphs:
        graph_out, enc_cache = encode_graphs(model.encoder, graphs)
    else:
        graph_out, enc_cache = None, None

    x = fusion_input(visual_feats if model.fusion_mode != "graph_only" else None,
                     graph_out, model.fusion_mode)
    fused, fuse_cache = fuse_batch(model.fusion, x)
    _, logits, head_cache = head_forward(fused, model.head, mode="train")

    l_triplet, d_fused_t = triplet_batch_hard_with_grad(fused, labels, cfg.margin)
    l_center, d_fused_c, d_centers = center_loss_with_grad(fused, labels, model.centers)
    l_id, d_logits = id_loss_with_grad(logits, labels, cfg.smoothing)
    total = combined_loss(l_triplet, l_center, l_id, cfg.lambda_center)

    head_grads, d_fused_h = head_backward(model.head, head_cache, d_logits)
    d_fused = d_fused_t + cfg.lambda_center * d_fused_c + d_fused_h
    fuse_grads, d_x = fuse_batch_backward(model.fusion, fuse_cache, d_fused)

    grads: dict[str, np.ndarray] = {}
    if use_graphs:
        if model.fusion_mode == "joint":
            d_graph = d_x[:, model.visual_dim :]
        else:
            d_graph = d_x
        enc_grads = encode_graphs_backward(model.encoder, enc_cache, d_graph)
        grads.update({f"encoder.{k}": v for k, v in enc_grads.items()})
    else:
        grads.update(
            {f"encoder.{k}": np.zeros_like(v)
             for k, v in encoder_param_dict(model.encoder).items()}
        )
    grads["fusion.weight"] = fuse_grads["weight"]
    grads["fusion.bias"] = fuse_grads["bias"]
    grads["head.bn_gain"] = head_grads["bn_gain"]
    grads["head.bn_bias"] = head_grads["bn_bias"]
    grads["head.w_cls"] = head_grads["w_cls"]

    losses = StepLosses(triplet=l_triplet, center=l_center, ident=l_id, total=total)
    return losses, grads, d_centers


class Adam:
    """Adam over a named parameter dict; updates arrays in place."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            p -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t, dtype=np.int64)}
        out.update({f"m.{k}": v for k, v in self.m.items()})
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])


# ---------------------------------------------------------------------------
# Data preparation


@dataclass
class TrainData:
    samples: list[PersonSample]
    labels: np.ndarray  # (N,) dense labels 0..P-1
    raw_ids: list[int]  # dense label -> raw dataset identity
    graphs: list[NumericGraph]
    visual: np.ndarray  # (N, D_vis)
    by_label: dict[int, list[int]] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.raw_ids)


def prepare_graph(sample_graph, embed_client, strict_person: bool = False) -> NumericGraph:
    """Stored document graph -> expanded, flow-reversed, numerified graph."""
    return numerify_graph(
        reverse_flow(expand_attributes(sample_graph)),
        embed_client,
        strict_person=strict_person,
    )


def build_train_data(manifest: DatasetManifest, components: Components) -> TrainData:
    samples = sorted(
        (s for s in manifest.samples if s.split == "train"), key=lambda s: s.image_id
    )
    if not samples:
        raise ValueError("manifest has no train samples")
    raw_ids = sorted({s.identity for s in samples})
    label_of = {raw: i for i, raw in enumerate(raw_ids)}
    labels = np.array([label_of[s.identity] for s in samples], dtype=np.int64)

    graphs = []
    feats = []
    for s in samples:
        doc = components.graph_store.get(s.image_id)
        graphs.append(
            prepare_graph(doc, components.embed_client, strict_person=components.strict_person)
        )
        tensor = preprocess(Path(s.image_path).read_bytes())
        feats.append(encode_image(tensor, components.backbone, image_id=s.image_id))
    visual = np.stack(feats)

    by_label: dict[int, list[int]] = {}
    for i, lab in enumerate(labels.tolist()):
        by_label.setdefault(lab, []).append(i)
    return TrainData(
        samples=samples,
        labels=labels,
        raw_ids=raw_ids,
        graphs=graphs,
        visual=visual,
        by_label=by_label,
    )


# ---------------------------------------------------------------------------
# Checkpointing


@dataclass
class Checkpoint:
    model: ReidModel
    meta: dict
    adam_state: dict[str, np.ndarray] | None

    @property
    def epoch(self) -> int:
        return int(self.meta["epoch"])

    @property
    def dataset_name(self) -> str:
        return str(self.meta["dataset_name"])

    @property
    def train_raw_ids(self) -> list[int]:
        return [int(i) for i in self.meta["train_raw_ids"]]


def save_checkpoint(
    ckpt_dir: Path,
    model: ReidModel,
    adam: Adam,
    rng: np.random.Generator,
    cfg: TrainConfig,
    *,
    epoch: int,
    global_step: int,
    steps_per_epoch: int,
    dataset_name: str,
    train_raw_ids: list[int],
    node_dim: int,
    edge_dim: int,
) -> Path:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tensors = dict(model_param_dict(model))
    tensors.update(model_buffer_dict(model))
    np.savez(ckpt_dir / "params.npz", **tensors)
    np.savez(ckpt_dir / "optimizer.npz", **adam.state_dict())
    meta = {
        "epoch": epoch,
        "global_step": global_step,
        "steps_per_epoch": steps_per_epoch,
        "seed": cfg.seed,
        "dataset_name": dataset_name,
        "train_raw_ids": train_raw_ids,
        "num_classes": len(train_raw_ids),
        "visual_dim": model.visual_dim,
        "node_dim": node_dim,
        "edge_dim": edge_dim,
        "hidden_dim": model.encoder.layer1.out_dim,
        "out_dim": model.encoder.layer2.out_dim,
        "negative_slope": model.encoder.layer1.negative_slope,
        "fusion_mode": model.fusion_mode,
        "kernel_backend": kernels.BACKEND,
        "rng_state": rng.bit_generator.state,
        "config": {**asdict(cfg), "decay_epochs": list(cfg.decay_epochs)},
    }
    (ckpt_dir / "manifest.json").write_text(
        json.dumps(meta, indent=2), encoding="utf-8"
    )
    return ckpt_dir


def load_checkpoint(ckpt_dir: str | Path) -> Checkpoint:
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / "manifest.json").read_text(encoding="utf-8"))
    rng = np.random.default_rng(0)  # placeholder init; tensors overwritten below
    model = init_model(
        rng,
        num_classes=meta["num_classes"],
        visual_dim=meta["visual_dim"],
        node_dim=meta["node_dim"],
        hidden_dim=meta["hidden_dim"],
        out_dim=meta["out_dim"],
        edge_dim=meta["edge_dim"],
        fusion_mode=meta["fusion_mode"],
        negative_slope=meta["negative_slope"],
    )
    with np.load(ckpt_dir / "params.npz") as data:
        targets = dict(model_param_dict(model))
        targets.update(model_buffer_dict(model))
        for k, arr in targets.items():
            arr[...] = data[k]
    adam_state = None
    opt_path = ckpt_dir / "optimizer.npz"
    if opt_path.exists():
        with np.load(opt_path) as data:
            adam_state = {k: np.array(data[k]) for k in data.files}
    return Checkpoint(model=model, meta=meta, adam_state=adam_state)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    checkpoint_dir: Path
    metrics_path: Path
    final_epoch: int
    steps_per_epoch: int


def _metric_line(step: int, epoch: int, lr: float, losses: StepLosses) -> str:
    return (
        f"{step},{epoch},{lr!r},{losses.triplet!r},{losses.center!r},"
        f"{losses.ident!r},{losses.total!r}"
    )


def train(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    components: Components,
    workdir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Full training loop; returns the final checkpoint location.

    ``resume_from`` restores parameters, optimizer moments, and the sampling
    RNG state from a checkpoint directory and continues after its epoch; the
    continued metrics log is appended to the workdir's existing one.
    """
    if cfg.epochs <= 0:
        raise ValueError("epochs must be >= 1; nothing to train")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    ckpt_root = workdir / "ckpt"
    metrics_path = workdir / "metrics.csv"

    data = build_train_data(manifest, components)
    eval_ids = {
        s.identity
        for s in manifest.samples
        if s.split in ("query", "gallery") and s.identity > 0
    }
    overlap = set(data.raw_ids) & eval_ids
    if overlap:
        raise IdentityOverlap(f"train/eval identity overlap: {sorted(overlap)[:5]}")

    node_dim = data.graphs[0].node_features.shape[1]
    edge_dim = components.embed_client.dim
    steps_per_epoch = max(1, len(data.samples) // cfg.batch_size)

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.meta["seed"] != cfg.seed:
            raise ValueError("resume seed differs from checkpoint seed")
        model = ck.model
        adam = Adam(model_param_dict(model))
        if ck.adam_state is not None:
            adam.load_state_dict(ck.adam_state)
        rng = np.random.default_rng(cfg.seed + 1)
        rng.bit_generator.state = ck.meta["rng_state"]
        start_epoch = ck.meta["epoch"] + 1
        global_step = ck.meta["global_step"]
        if not metrics_path.exists():
            metrics_path.write_text(METRICS_HEADER + "\n", encoding="utf-8")
    else:
        init_rng = np.random.default_rng(cfg.seed)
        model = init_model(
            init_rng,
            num_classes=data.num_classes,
            visual_dim=data.visual.shape[1],
            node_dim=node_dim,
            hidden_dim=cfg.hidden_dim,
            out_dim=cfg.out_dim,
            edge_dim=edge_dim,
            fusion_mode=cfg.fusion_mode,
            negative_slope=cfg.negative_slope,
        )
        adam = Adam(model_param_dict(model))
        rng = np.random.default_rng(cfg.seed + 1)
        start_epoch = 1
        global_step = 0
        metrics_path.write_text(METRICS_HEADER + "\n", encoding="utf-8")

    last_dir = ckpt_root / f"epoch_{start_epoch - 1}"
    for epoch in range(start_epoch, cfg.epochs + 1):
        lr = lr_at(epoch, cfg)
        lines = []
        for _ in range(steps_per_epoch):
            idx = pk_sample(data.by_label, cfg.batch_size, cfg.instances_per_id, rng)
            losses, grads, d_centers = train_step(
                model,
                [data.graphs[i] for i in idx],
                data.visual[idx],
                data.labels[idx],
                cfg,
            )
            adam.step(grads, lr)
            model.centers.centers -= cfg.center_lr * d_centers
            global_step += 1
            lines.append(_metric_line(global_step, epoch, lr, losses))
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        last_dir = save_checkpoint(
            ckpt_root / f"epoch_{epoch}",
            model,
            adam,
            rng,
            cfg,
            epoch=epoch,
            global_step=global_step,
            steps_per_epoch=steps_per_epoch,
            dataset_name=manifest.name,
            train_raw_ids=data.raw_ids,
            node_dim=node_dim,
            edge_dim=edge_dim,
        )
        logger.info(
            "epoch %d done (lr %.3g, last total loss %s)", epoch, lr, lines[-1].split(",")[-1]
        )
    return TrainResult(
        checkpoint_dir=last_dir,
        metrics_path=metrics_path,
        final_epoch=cfg.epochs,
        steps_per_epoch=steps_per_epoch,
    )
