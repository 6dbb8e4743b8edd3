"""Fusion layer, batch-norm neck, and embedding records."""

from __future__ import annotations

import numpy as np
import pytest

from oracles import finite_diff, rel_err
from sgreid.fusion import (
    BN_EPS,
    BN_MOMENTUM,
    FUSION_MODES,
    fuse,
    fuse_batch,
    fuse_batch_backward,
    fusion_input,
    fusion_input_dim,
    head_backward,
    head_forward,
    init_fusion_params,
    init_head_params,
    l2_normalize,
    load_records,
    make_embedding_record,
    save_records,
)
from sgreid.gat import ShapeMismatch


def test_fusion_input_modes():
    v = np.ones((2, 3))
    g = np.full((2, 4), 2.0)
    assert fusion_input(v, g, "joint").shape == (2, 7)
    assert np.array_equal(fusion_input(v, None, "visual_only"), v)
    assert np.array_equal(fusion_input(None, g, "graph_only"), g)
    assert fusion_input_dim(3, 4, "joint") == 7
    for mode, missing in (("joint", (None, g)), ("visual_only", (None, g)), ("graph_only", (v, None))):
        with pytest.raises(ShapeMismatch):
            fusion_input(*missing, mode)
    with pytest.raises(ValueError):
        fusion_input(v, g, "both")
    with pytest.raises(ValueError):
        fusion_input_dim(3, 4, "both")
    assert set(FUSION_MODES) == {"joint", "visual_only", "graph_only"}


def test_fuse_single_matches_batch():
    rng = np.random.default_rng(0)
    params = init_fusion_params(rng, in_dim=7, out_dim=5)
    v, g = rng.standard_normal(3), rng.standard_normal(4)
    single = fuse(v, g, params)
    batched, _ = fuse_batch(params, fusion_input(v[None], g[None], "joint"))
    assert np.max(np.abs(single - batched[0])) < 1e-12
    with pytest.raises(ShapeMismatch):
        fuse(v, rng.standard_normal(5), params)
    with pytest.raises(ShapeMismatch):
        fuse_batch(params, np.zeros((2, 6)))


def test_fuse_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    params = init_fusion_params(rng, in_dim=6, out_dim=4)
    x = rng.standard_normal((3, 6))
    weight = rng.standard_normal((3, 4))

    out, cache = fuse_batch(params, x)
    grads, grad_x = fuse_batch_backward(params, cache, weight)

    def loss(_):
        o, _ = fuse_batch(params, x)
        return float(np.sum(o * weight))

    assert rel_err(grads["weight"], finite_diff(loss, params.weight)) < 1e-7
    assert rel_err(grads["bias"], finite_diff(loss, params.bias)) < 1e-7
    assert rel_err(grad_x, finite_diff(loss, x)) < 1e-7


def test_head_train_mode_statistics():
    rng = np.random.default_rng(1)
    params = init_head_params(rng, num_classes=5, dim=4)
    f = rng.standard_normal((8, 4)) * 3.0 + 1.0
    bn_out, logits, cache = head_forward(f, params, mode="train", update_running=False)
    assert logits.shape == (8, 5)
    assert cache is not None
    assert np.max(np.abs(bn_out.mean(axis=0))) < 1e-10  # gain 1, bias 0
    assert np.max(np.abs(bn_out.var(axis=0) - 1.0)) < 1e-4  # off by eps only
    # running buffers untouched
    assert np.array_equal(params.bn_running_mean, np.zeros(4))
    assert np.array_equal(params.bn_running_var, np.ones(4))


def test_head_running_buffer_update_and_eval():
    rng = np.random.default_rng(2)
    params = init_head_params(rng, num_classes=3, dim=4)
    f = rng.standard_normal((16, 4)) * 2.0 - 1.0
    mean, var = f.mean(axis=0), f.var(axis=0)
    head_forward(f, params, mode="train")
    assert np.max(np.abs(params.bn_running_mean - BN_MOMENTUM * mean)) < 1e-12
    assert np.max(
        np.abs(params.bn_running_var - ((1 - BN_MOMENTUM) + BN_MOMENTUM * var))
    ) < 1e-12

    bn_out, logits, cache = head_forward(f, params, mode="eval")
    assert logits is None and cache is None
    expected = params.bn_gain * (f - params.bn_running_mean) / np.sqrt(
        params.bn_running_var + BN_EPS
    ) + params.bn_bias
    assert np.max(np.abs(bn_out - expected)) < 1e-12

    with pytest.raises(ValueError):
        head_forward(f, params, mode="test")
    with pytest.raises(ShapeMismatch):
        head_forward(np.zeros((2, 5)), params)


def test_eval_mode_is_per_sample():
    # batch statistics must not leak between samples in eval mode
    rng = np.random.default_rng(3)
    params = init_head_params(rng, num_classes=3, dim=4)
    head_forward(rng.standard_normal((8, 4)), params, mode="train")
    f = rng.standard_normal((4, 4))
    full, _, _ = head_forward(f, params, mode="eval")
    one, _, _ = head_forward(f[2:3], params, mode="eval")
    assert np.array_equal(full[2], one[0])


def test_head_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    params = init_head_params(rng, num_classes=4, dim=5)
    f = rng.standard_normal((6, 5))
    weight = rng.standard_normal((6, 4))

    _, logits, cache = head_forward(f, params, mode="train", update_running=False)
    grads, grad_f = head_backward(params, cache, weight)

    def loss(_):
        _, lo, _ = head_forward(f, params, mode="train", update_running=False)
        return float(np.sum(lo * weight))

    assert rel_err(grads["w_cls"], finite_diff(loss, params.w_cls)) < 1e-6
    assert rel_err(grads["bn_gain"], finite_diff(loss, params.bn_gain)) < 1e-6
    assert rel_err(grads["bn_bias"], finite_diff(loss, params.bn_bias)) < 1e-6
    assert rel_err(grad_f, finite_diff(loss, f)) < 1e-6


def test_records_are_unit_norm_and_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    recs = [
        make_embedding_record(f"img{i}", label=i % 3, camera=1 + i % 2,
                              bn_feature=rng.standard_normal(6) * 4, split="gallery")
        for i in range(5)
    ]
    for r in recs:
        assert np.linalg.norm(r.feature) == pytest.approx(1.0, abs=1e-12)

    path = tmp_path / "records.npz"
    save_records(path, recs)
    back = load_records(path)
    assert [r.image_id for r in back] == [r.image_id for r in recs]
    assert [r.label for r in back] == [r.label for r in recs]
    assert [r.camera for r in back] == [r.camera for r in recs]
    assert [r.split for r in back] == ["gallery"] * 5
    assert np.array_equal(
        np.stack([r.feature for r in back]), np.stack([r.feature for r in recs])
    )
    save_records(tmp_path / "empty.npz", [])
    assert load_records(tmp_path / "empty.npz") == []


def test_cosine_and_euclidean_orders_agree_on_unit_vectors():
    rng = np.random.default_rng(12)
    q = l2_normalize(rng.standard_normal(8))
    gallery = l2_normalize(rng.standard_normal((20, 8)), axis=1)
    euclid = np.linalg.norm(gallery - q, axis=1)
    cosine = 1.0 - gallery @ q
    assert np.array_equal(np.argsort(euclid, kind="stable"), np.argsort(cosine, kind="stable"))
