"""Training loop machinery: schedule, sampling, optimizer, checkpoints."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import SMALL, make_graph, small_train_config
from oracles import finite_diff, rel_err
from sgreid.data import DatasetManifest
from sgreid.trainkit import (
    Adam,
    IdentityOverlap,
    InsufficientIdentities,
    METRICS_HEADER,
    TrainConfig,
    init_model,
    load_checkpoint,
    lr_at,
    model_param_dict,
    pk_sample,
    train,
    train_step,
)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=10, instances_per_id=4)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=4, instances_per_id=1)
    assert TrainConfig().batch_size == 64


def test_lr_schedule_exact_values():
    cfg = TrainConfig(epochs=120, base_lr=0.00035, warmup_epochs=10, decay_epochs=(40, 70))
    base = 0.00035
    floor = base / 100
    assert lr_at(1, cfg) == pytest.approx(floor, rel=1e-12)
    assert lr_at(5, cfg) == pytest.approx(floor + (base - floor) * 4 / 9, rel=1e-12)
    assert lr_at(10, cfg) == pytest.approx(base, rel=1e-12)
    assert lr_at(11, cfg) == base
    assert lr_at(40, cfg) == base
    assert lr_at(41, cfg) == base / 10
    assert lr_at(70, cfg) == base / 10
    assert lr_at(71, cfg) == base / 100
    assert lr_at(120, cfg) == base / 100
    with pytest.raises(ValueError):
        lr_at(0, cfg)
    with pytest.raises(ValueError):
        lr_at(121, cfg)
    # degenerate warmups never divide by zero
    assert lr_at(1, TrainConfig(warmup_epochs=1)) == base
    assert lr_at(1, TrainConfig(warmup_epochs=0)) == base


def test_pk_sample_group_structure():
    rng = np.random.default_rng(0)
    index = {label: list(range(label * 10, label * 10 + 6)) for label in range(7)}
    for _ in range(10):
        batch = pk_sample(index, batch_size=16, instances_per_id=4, rng=rng)
        assert batch.shape == (16,)
        groups = batch.reshape(4, 4)
        group_labels = [int(g[0] // 10) for g in groups]
        assert len(set(group_labels)) == 4
        for g in groups:
            assert len(set(g // 10)) == 1  # one identity per group
            assert len(set(g.tolist())) == 4  # enough images: no replacement


def test_pk_sample_replacement_only_when_short():
    rng = np.random.default_rng(1)
    index = {0: [0, 1], 1: [10, 11, 12, 13]}
    batch = pk_sample(index, batch_size=8, instances_per_id=4, rng=rng)
    short_group = batch[np.isin(batch, [0, 1])]
    assert len(short_group) == 4  # duplicates fill the quota
    assert set(short_group.tolist()) <= {0, 1}


def test_pk_sample_errors_and_determinism():
    with pytest.raises(InsufficientIdentities):
        pk_sample({0: [0, 1]}, batch_size=8, instances_per_id=4,
                  rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        pk_sample({0: [0], 1: [1]}, batch_size=7, instances_per_id=4,
                  rng=np.random.default_rng(0))
    index = {i: list(range(i * 4, i * 4 + 4)) for i in range(6)}
    a = pk_sample(index, 8, 4, np.random.default_rng(42))
    b = pk_sample(index, 8, 4, np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_adam_matches_reference_updates():
    rng = np.random.default_rng(2)
    p = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}
    ref = {k: v.copy() for k, v in p.items()}
    opt = Adam(p, beta1=0.9, beta2=0.999, eps=1e-8)

    m = {k: np.zeros_like(v) for k, v in ref.items()}
    v2 = {k: np.zeros_like(v) for k, v in ref.items()}
    for t in range(1, 4):
        grads = {k: rng.standard_normal(val.shape) for k, val in ref.items()}
        opt.step(grads, lr=0.01)
        for k in ref:
            g = grads[k]
            m[k] = 0.9 * m[k] + 0.1 * g
            v2[k] = 0.999 * v2[k] + 0.001 * g * g
            mhat = m[k] / (1 - 0.9**t)
            vhat = v2[k] / (1 - 0.999**t)
            ref[k] -= 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    for k in ref:
        assert np.max(np.abs(p[k] - ref[k])) < 1e-14


def test_adam_state_roundtrip_continues_identically():
    rng = np.random.default_rng(3)
    p1 = {"w": rng.standard_normal((2, 2))}
    p2 = {"w": p1["w"].copy()}
    a1, a2 = Adam(p1), Adam(p2)
    g1 = {"w": rng.standard_normal((2, 2))}
    g2 = {"w": rng.standard_normal((2, 2))}
    a1.step(g1, 0.1)
    a2.step(g1, 0.1)

    fresh = Adam(p2)
    fresh.load_state_dict(a2.state_dict())
    a1.step(g2, 0.1)
    fresh.step(g2, 0.1)
    assert np.array_equal(p1["w"], p2["w"])
    assert fresh.t == a1.t


def test_train_step_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    dim, vis_dim = 6, 5
    cfg = TrainConfig(batch_size=4, instances_per_id=2, hidden_dim=7, out_dim=6)
    model = init_model(rng, num_classes=2, visual_dim=vis_dim, node_dim=dim,
                       hidden_dim=7, out_dim=6, edge_dim=dim)
    graphs = [make_graph(rng, 4, 4, dim) for _ in range(4)]
    visual = rng.standard_normal((4, vis_dim))
    labels = np.array([0, 0, 1, 1])

    _, grads, d_centers = train_step(model, graphs, visual, labels, cfg)

    def loss(_):
        losses, _, _ = train_step(model, graphs, visual, labels, cfg)
        return losses.total

    for name in ("fusion.weight", "head.w_cls", "head.bn_gain",
                 "encoder.l2.attn", "encoder.ln_gain"):
        tensor = model_param_dict(model)[name]
        assert rel_err(grads[name], finite_diff(loss, tensor)) < 1e-5, name

    # center-table gradient is for the unweighted center loss
    fd_centers = finite_diff(
        lambda _: train_step(model, graphs, visual, labels, cfg)[0].center,
        model.centers.centers,
    )
    assert rel_err(d_centers, fd_centers) < 1e-6


def test_training_writes_metrics_and_checkpoints(tiny_run):
    _, result = tiny_run
    text = result.metrics_path.read_text().splitlines()
    assert text[0] == METRICS_HEADER
    assert len(text) == 1 + result.final_epoch * result.steps_per_epoch
    for line in text[1:]:
        parts = line.split(",")
        assert len(parts) == 7
        int(parts[0]), int(parts[1])
        [float(x) for x in parts[2:]]

    ck = load_checkpoint(result.checkpoint_dir)
    assert ck.epoch == result.final_epoch
    assert ck.dataset_name == "synthetic"
    assert ck.train_raw_ids == list(range(1, 9))
    assert ck.adam_state is not None
    assert ck.meta["num_classes"] == 8


def test_checkpoint_tensor_roundtrip(tiny_run):
    _, result = tiny_run
    ck1 = load_checkpoint(result.checkpoint_dir)
    ck2 = load_checkpoint(result.checkpoint_dir)
    p1, p2 = model_param_dict(ck1.model), model_param_dict(ck2.model)
    for k in p1:
        assert np.array_equal(p1[k], p2[k]), k
    assert np.array_equal(
        ck1.model.head.bn_running_var, ck2.model.head.bn_running_var
    )


def test_resume_reproduces_uninterrupted_run(synth_root, small_components, tmp_path):
    _, manifest = synth_root
    full_cfg = small_train_config(seed=11, epochs=4)
    full = train(manifest, full_cfg, small_components, tmp_path / "full")

    part_cfg = small_train_config(seed=11, epochs=2)
    part = train(manifest, part_cfg, small_components, tmp_path / "stitched")
    resumed = train(
        manifest,
        small_train_config(seed=11, epochs=4),
        small_components,
        tmp_path / "stitched",
        resume_from=part.checkpoint_dir,
    )

    a = load_checkpoint(full.checkpoint_dir)
    b = load_checkpoint(resumed.checkpoint_dir)
    pa, pb = model_param_dict(a.model), model_param_dict(b.model)
    for k in pa:
        assert np.array_equal(pa[k], pb[k]), k
    assert np.array_equal(a.model.centers.centers, b.model.centers.centers)
    assert a.meta["global_step"] == b.meta["global_step"] == 20
    assert (
        full.metrics_path.read_text() == resumed.metrics_path.read_text()
    )

    with pytest.raises(ValueError):
        train(manifest, small_train_config(seed=12, epochs=4), small_components,
              tmp_path / "reseeded", resume_from=part.checkpoint_dir)


def test_identity_overlap_refuses_to_train(synth_root, small_components, tmp_path):
    _, manifest = synth_root
    samples = [s for s in manifest.samples]
    leak = next(i for i, s in enumerate(samples) if s.split == "query")
    from dataclasses import replace

    samples[leak] = replace(samples[leak], identity=1)  # 1 is a train identity
    bad = DatasetManifest(name=manifest.name, samples=samples)
    with pytest.raises(IdentityOverlap):
        train(bad, small_train_config(), small_components, tmp_path / "w")
