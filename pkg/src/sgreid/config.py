"""Flat key = value configuration shared by every CLI verb.

One file, one namespace: every tunable has a typed default below, `--dump-config`
prints them all, and a config file may set any subset. Unknown keys fail loudly
so typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import Components, GraphStore
from .evalkit import EvalOptions
from .textembed import CachingEmbedClient, FixtureEmbedClient, StubEmbedClient
from .trainkit import TrainConfig
from .visual import FixtureBackbone, StubBackbone


class ConfigError(ValueError):
    """Unknown key, bad value, or unsupported mode in a config document."""


@dataclass
class Config:
    # Paths and identity of the run
    workdir: str = "work"
    seed: int = 42

    # Dataset
    dataset_kind: str = "synthetic"  # synthetic | market1501 | cuhk03np
    dataset_root: str = "work/synth"
    dataset_name: str = ""  # empty: use dataset_kind
    graph_store_dir: str = ""  # empty: <dataset_root>/graphs
    strict_person: bool = False

    # Text embedding client
    embed_mode: str = "stub"  # stub | fixture
    embed_dim: int = 384
    embed_stub_seed: int = 1234
    embed_fixture_path: str = ""
    embed_cache_path: str = ""  # optional write-through vocabulary store

    # Visual backbone adapter
    backbone_mode: str = "stub"  # stub | fixture
    backbone_dim: int = 768
    backbone_stub_seed: int = 99
    backbone_fixture_dir: str = ""

    # Scene-graph generation clients
    lvlm_fixture_dir: str = ""
    repair_mode: str = "none"  # none | replay
    repair_fixture_dir: str = ""

    # Graph encoder and fusion
    graph_hidden_dim: int = 384
    graph_out_dim: int = 128
    negative_slope: float = 0.2
    fusion_mode: str = "joint"  # joint | visual_only | graph_only

    # Training
    train_batch_size: int = 64
    train_instances_per_id: int = 4
    train_epochs: int = 120
    train_base_lr: float = 0.00035
    train_warmup_epochs: int = 10
    train_decay_epoch_1: int = 40
    train_decay_epoch_2: int = 70
    train_margin: float = 0.3
    train_lambda_center: float = 0.0005
    train_smoothing: float = 0.1
    train_center_lr: float = 0.5

    # Evaluation
    eval_rerank: bool = True
    eval_k1: int = 20
    eval_k2: int = 6
    eval_lambda: float = 0.3
    eval_max_rank: int = 50
    eval_batch_size: int = 64

    # Synthetic dataset generator
    synth_train_ids: int = 8
    synth_test_ids: int = 8
    synth_images_per_id: int = 10
    synth_queries_per_id: int = 4
    synth_seed: int = 7


# `from __future__ import annotations` leaves field types as strings.
_TYPE_BY_NAME = {"str": str, "int": int, "float": float, "bool": bool}
_FIELD_TYPES = {
    f.name: _TYPE_BY_NAME[f.type if isinstance(f.type, str) else f.type.__name__]
    for f in dataclasses.fields(Config)
}


def _parse_value(key: str, raw: str, target_type: type):
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {target_type.__name__}, got {raw!r}") from None
    return raw


def parse_config(text: str, base: Config | None = None) -> Config:
    """Apply ``key = value`` lines to a default (or given) Config.

    Blank lines and lines starting with ``#`` are ignored. Every key must be
    a known field.
    """
    cfg = dataclasses.replace(base) if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw, _FIELD_TYPES[key]))
    return cfg


def load_config(path: str | Path, base: Config | None = None) -> Config:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply repeated --set key=value pairs on top of a loaded config."""
    return parse_config("\n".join(overrides), cfg)


def dump_config(cfg: Config | None = None) -> str:
    cfg = cfg or Config()
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(Config)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Factories


def dataset_name(cfg: Config) -> str:
    return cfg.dataset_name or cfg.dataset_kind


def graph_store_path(cfg: Config) -> Path:
    return Path(cfg.graph_store_dir) if cfg.graph_store_dir else Path(cfg.dataset_root) / "graphs"


def build_components(cfg: Config) -> Components:
    if cfg.embed_mode == "stub":
        inner = StubEmbedClient(dim=cfg.embed_dim, seed=cfg.embed_stub_seed)
    elif cfg.embed_mode == "fixture":
        if not cfg.embed_fixture_path:
            raise ConfigError("embed_mode = fixture needs embed_fixture_path")
        inner = FixtureEmbedClient(cfg.embed_fixture_path)
    else:
        raise ConfigError(f"unsupported embed_mode {cfg.embed_mode!r}")
    embed_client = CachingEmbedClient(inner, cfg.embed_cache_path or None)

    if cfg.backbone_mode == "stub":
        backbone = StubBackbone(dim=cfg.backbone_dim, seed=cfg.backbone_stub_seed)
    elif cfg.backbone_mode == "fixture":
        if not cfg.backbone_fixture_dir:
            raise ConfigError("backbone_mode = fixture needs backbone_fixture_dir")
        backbone = FixtureBackbone(cfg.backbone_fixture_dir)
    else:
        raise ConfigError(f"unsupported backbone_mode {cfg.backbone_mode!r}")

    return Components(
        graph_store=GraphStore(graph_store_path(cfg)),
        embed_client=embed_client,
        backbone=backbone,
        strict_person=cfg.strict_person,
    )


def build_train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.train_batch_size,
        instances_per_id=cfg.train_instances_per_id,
        epochs=cfg.train_epochs,
        base_lr=cfg.train_base_lr,
        warmup_epochs=cfg.train_warmup_epochs,
        decay_epochs=(cfg.train_decay_epoch_1, cfg.train_decay_epoch_2),
        seed=cfg.seed,
        lambda_center=cfg.train_lambda_center,
        margin=cfg.train_margin,
        smoothing=cfg.train_smoothing,
        center_lr=cfg.train_center_lr,
        hidden_dim=cfg.graph_hidden_dim,
        out_dim=cfg.graph_out_dim,
        negative_slope=cfg.negative_slope,
        fusion_mode=cfg.fusion_mode,
    )


def build_eval_options(cfg: Config, cross_dataset: bool = False, rerank: bool | None = None) -> EvalOptions:
    return EvalOptions(
        rerank=cfg.eval_rerank if rerank is None else rerank,
        k1=cfg.eval_k1,
        k2=cfg.eval_k2,
        lambda_rr=cfg.eval_lambda,
        cross_dataset=cross_dataset,
        max_rank=cfg.eval_max_rank,
        batch_size=cfg.eval_batch_size,
    )
