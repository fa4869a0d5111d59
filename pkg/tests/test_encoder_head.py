import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memseg import tensor as T
from memseg.config import ModelConfig
from memseg.encoder import MultiLevelFeatures, encode, init_encoder
from memseg.head import bottleneck, context_features, init_head, pyramid_pool, topdown_fuse
from memseg.tensor import ShapeError


def test_default_shapes():
    cfg = ModelConfig()
    assert cfg.channels == (16, 32, 64, 64)
    feats = encode(init_encoder(0, cfg), np.random.default_rng(0).random((3, 64, 64)))
    assert [f.shape for f in (feats.x1, feats.x2, feats.x3, feats.x4)] == \
        [(16, 16, 16), (32, 8, 8), (64, 4, 4), (64, 2, 2)]


def test_batched_shapes(tiny_cfg):
    feats = encode(init_encoder(0, tiny_cfg), np.zeros((2, 3, 32, 64)))
    assert feats.x4.shape == (2, 8, 1, 2)


def test_init_deterministic(tiny_cfg):
    a, b, c = init_encoder(3, tiny_cfg), init_encoder(3, tiny_cfg), init_encoder(4, tiny_cfg)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_glorot_bound(tiny_cfg):
    p = init_encoder(0, tiny_cfg)
    w = p["encoder.stem1.w"].data  # 3 -> 4 channels, 3x3
    bound = np.sqrt(6.0 / (3 * 9 + 4 * 9))
    assert np.abs(w).max() <= bound
    assert np.all(p["encoder.stem1.b"].data == 0)


def test_zero_image_zero_features(tiny_cfg):
    feats = encode(init_encoder(0, tiny_cfg), np.zeros((3, 32, 32)))
    assert all(np.all(f.data == 0) for f in (feats.x1, feats.x2, feats.x3, feats.x4))


def test_indivisible_input(tiny_cfg):
    with pytest.raises(ShapeError):
        encode(init_encoder(0, tiny_cfg), np.zeros((3, 48, 32)))


def test_encode_deterministic(tiny_cfg):
    p = init_encoder(0, tiny_cfg)
    img = np.random.default_rng(0).random((3, 32, 32))
    np.testing.assert_array_equal(encode(p, img).x4.data, encode(p, img).x4.data)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_features_finite(seed):
    cfg = ModelConfig()
    img = np.random.default_rng(seed).random((3, 32, 32)).astype(np.float32)
    feats = encode(init_encoder(seed % 97, cfg), img)
    assert all(np.isfinite(f.data).all() for f in (feats.x1, feats.x2, feats.x3, feats.x4))


def _head(cfg, seed=0):
    p = init_head(seed, cfg)
    for v in p.values():
        v.data[...] = np.random.default_rng(seed).normal(scale=0.3, size=v.shape)
    return p


def test_pyramid_output_dims(tiny_cfg):
    x4 = T.Tensor(np.random.default_rng(0).random((8, 6, 6)))
    assert pyramid_pool(_head(tiny_cfg), x4, (1, 2, 3, 6)).shape[-2:] == (6, 6)


def test_pyramid_constant_input(tiny_cfg):
    pooled = T.adaptive_avg_pool(T.Tensor(np.full((8, 6, 6), 0.7)), 3).data
    np.testing.assert_allclose(pooled, 0.7)


def test_grid_one_is_global_mean():
    x = np.random.default_rng(0).random((3, 5, 4))
    np.testing.assert_allclose(T.adaptive_avg_pool(T.Tensor(x), 1).data[:, 0, 0], x.mean(axis=(1, 2)))


def test_grid_skip_warns_and_ignores_columns(tiny_cfg, caplog):
    p = _head(tiny_cfg)
    x4 = T.Tensor(np.random.default_rng(1).random((8, 2, 2)))
    with caplog.at_level(logging.WARNING):
        out = pyramid_pool(p, x4, (1, 2, 3, 6))
    assert out.shape == (8, 2, 2)
    grads = T.grad(T.tsum(out), {"w": p["head.ppm_fuse.w"]})["w"]
    # columns for grids 3 and 6 (third and fourth ppm blocks) receive nothing
    assert np.all(grads[:, 8 + 2 * 4:] == 0)
    assert np.any(grads[:, :8 + 2 * 4] != 0)


def test_topdown_zero(tiny_cfg):
    p = init_head(0, tiny_cfg)
    z = lambda c, s: T.Tensor(np.zeros((c, s, s)))
    feats = MultiLevelFeatures(z(4, 8), z(6, 4), z(8, 2), z(8, 1))
    out = topdown_fuse(p, feats, z(8, 1))
    assert out.shape == (8, 4, 4)
    assert np.all(out.data == 0)


def test_topdown_shape_mismatch(tiny_cfg):
    p = init_head(0, tiny_cfg)
    z = lambda c, s: T.Tensor(np.zeros((c, s, s)))
    with pytest.raises(ShapeError):
        topdown_fuse(p, MultiLevelFeatures(z(4, 8), z(6, 4), z(8, 2), z(8, 1)), z(8, 2))


def test_context_and_bottleneck_agree(tiny_cfg):
    enc, head = init_encoder(0, tiny_cfg), init_head(0, tiny_cfg)
    feats = encode(enc, np.random.default_rng(0).random((3, 64, 32)))
    c_wi = context_features(head, feats, tiny_cfg.pool_grids)
    r = bottleneck(head, feats)
    assert c_wi.shape == r.shape == (8, 8, 4)


def test_identity_bottleneck():
    cfg = ModelConfig(channels=(4, 8, 8, 8), embed_dim=8, ppm_dim=4)
    head = init_head(0, cfg)
    head["head.bottleneck.w"].data[...] = np.eye(8)
    x2 = np.random.default_rng(0).random((8, 4, 4))
    z = T.Tensor(np.zeros(1))
    np.testing.assert_allclose(bottleneck(head, MultiLevelFeatures(z, T.Tensor(x2), z, z)).data, x2, rtol=1e-6)
