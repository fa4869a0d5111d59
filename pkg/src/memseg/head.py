"""Pyramid pooling + top-down fusion head, and the stride-8 bottleneck feature."""
from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .config import ModelConfig, substream
from .encoder import MultiLevelFeatures, conv1x1_param
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)
_warned_grids = set()


def init_head(seed: int, cfg: ModelConfig) -> dict:
    rng = substream(seed, "head")
    _, c2, c3, c4 = cfg.channels
    c, pd = cfg.embed_dim, cfg.ppm_dim
    dt = cfg.dtype
    p = {}

    def lin(name, c_in, c_out):
        p[f"{name}.w"] = T.parameter(conv1x1_param(rng, c_in, c_out, dt))
        p[f"{name}.b"] = T.parameter(np.zeros(c_out, dtype=dt))

    for g in cfg.pool_grids:
        lin(f"head.ppm{g}", c4, pd)
    lin("head.ppm_fuse", c4 + pd * len(cfg.pool_grids), c)
    lin("head.lat2", c2, c)
    lin("head.lat3", c3, c)
    lin("head.fuse", 3 * c, c)
    lin("head.bottleneck", c2, c)
    return p


def _affine(x, p, name):
    return T.conv1x1(x, p[f"{name}.w"], p[f"{name}.b"])


def pyramid_pool(params: dict, x4: Tensor, grids) -> Tensor:
    """Pool at each grid, project, resize back, concat with ``x4``, fuse.

    Grids larger than ``x4``'s spatial dims are skipped; the fuse weight rows
    for a skipped grid are then unused.
    """
    h, w = x4.shape[-2:]
    c4 = x4.shape[-3]
    pd = params[f"head.ppm{grids[0]}.w"].shape[0]
    branches = [x4]
    used_cols = [np.arange(c4)]
    for i, g in enumerate(grids):
        if g > min(h, w):
            if (g, h, w) not in _warned_grids:
                _warned_grids.add((g, h, w))
                log.warning("pyramid pooling grid %d skipped for %dx%d input", g, h, w)
            continue
        pooled = T.adaptive_avg_pool(x4, g)
        proj = T.relu(_affine(pooled, params, f"head.ppm{g}"))
        branches.append(T.bilinear_resize(proj, h, w))
        used_cols.append(c4 + i * pd + np.arange(pd))
    cat = T.concat(branches, axis=x4.ndim - 3)
    fw = params["head.ppm_fuse.w"]
    cols = np.concatenate(used_cols)
    if len(cols) != fw.shape[1]:
        fw = _select_columns(fw, cols)
    return T.relu(T.conv1x1(cat, fw, params["head.ppm_fuse.b"]))


def _select_columns(w: Tensor, cols: np.ndarray) -> Tensor:
    shape = w.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, cols] = g
        return (out,)

    return T._result(w.data[:, cols], (w,), back)


def topdown_fuse(params: dict, feats: MultiLevelFeatures, ppm_out: Tensor) -> Tensor:
    """Top-down pathway ending in a C-channel map at stride 8."""
    x2, x3 = feats.x2, feats.x3
    if ppm_out.shape[-2:] != feats.x4.shape[-2:]:
        raise ShapeError(f"pyramid output {ppm_out.shape} does not match x4 {feats.x4.shape}")
    h2, w2 = x2.shape[-2:]
    h3, w3 = x3.shape[-2:]
    f4 = ppm_out
    f3 = _affine(x3, params, "head.lat3") + T.bilinear_resize(f4, h3, w3)
    f2 = _affine(x2, params, "head.lat2") + T.bilinear_resize(f3, h2, w2)
    stacked = T.concat([f2, T.bilinear_resize(f3, h2, w2), T.bilinear_resize(f4, h2, w2)],
                       axis=x2.ndim - 3)
    return T.relu(_affine(stacked, params, "head.fuse"))


def context_features(params: dict, feats: MultiLevelFeatures, grids) -> Tensor:
    return topdown_fuse(params, feats, pyramid_pool(params, feats.x4, grids))


def bottleneck(params: dict, feats: MultiLevelFeatures) -> Tensor:
    """Linear 1x1 projection of the stride-8 level to the embedding dim."""
    return _affine(feats.x2, params, "head.bottleneck")
