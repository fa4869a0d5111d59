"""Relation map between pixel features and memory-gathered features, refinement, classifier."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .encoder import conv1x1_param
from .tensor import ConfigError, ShapeError, Tensor


def init_projections(rng: np.random.Generator, prefix: str, dim: int, dtype) -> dict:
    """q/k/v project C -> C/2, o projects C/2 -> C."""
    if dim % 2:
        raise ConfigError(f"embedding dim must be even for attention projections, got {dim}")
    half = dim // 2
    p = {}
    for name, (c_in, c_out) in (("q", (dim, half)), ("k", (dim, half)),
                                ("v", (dim, half)), ("o", (half, dim))):
        p[f"{prefix}.{name}.w"] = T.parameter(conv1x1_param(rng, c_in, c_out, dtype))
        p[f"{prefix}.{name}.b"] = T.parameter(np.zeros(c_out, dtype=dtype))
    return p


def project(params: dict, prefix: str, name: str, x) -> Tensor:
    return T.conv1x1(x, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"])


def tokens(x: Tensor) -> Tensor:
    """(..., C, h, w) -> (..., hw, C)."""
    *lead, c, h, w = x.shape
    return T.swap_last(T.reshape(x, (*lead, c, h * w)))


def untokens(x: Tensor, h: int, w: int) -> Tensor:
    """(..., hw, C) -> (..., C, h, w)."""
    *lead, n, c = x.shape
    return T.reshape(T.swap_last(x), (*lead, c, h, w))


def relations(params: dict, prefix: str, r, c_bi_prime) -> Tensor:
    """Row-softmax of scaled query/key products: (..., hw, hw)."""
    r, c_bi_prime = T.as_tensor(r), T.as_tensor(c_bi_prime, dtype=T.as_tensor(r).dtype)
    if r.shape != c_bi_prime.shape:
        raise ShapeError(f"relation inputs differ: {r.shape} vs {c_bi_prime.shape}")
    c = r.shape[-3]
    if c % 2:
        raise ConfigError(f"embedding dim must be even, got {c}")
    q = tokens(project(params, prefix, "q", r))
    k = tokens(project(params, prefix, "k", c_bi_prime))
    logits = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(c / 2))
    return T.softmax_rows(logits)


def refine(params: dict, prefix: str, o: Tensor, c_bi_prime) -> Tensor:
    """Mix projected memory features with the relation map and project back to C."""
    c_bi_prime = T.as_tensor(c_bi_prime, dtype=o.dtype)
    h, w = c_bi_prime.shape[-2:]
    if o.shape[-1] != h * w or o.shape[-2] != h * w:
        raise ShapeError(f"relation map {o.shape} does not fit a {h}x{w} grid")
    v = tokens(project(params, prefix, "v", c_bi_prime))
    mixed = untokens(T.matmul(o, v), h, w)
    return project(params, prefix, "o", mixed)


def init_classifier(rng, name: str, c_in: int, k: int, dtype) -> dict:
    return {f"{name}.w": T.parameter(conv1x1_param(rng, c_in, k, dtype)),
            f"{name}.b": T.parameter(np.zeros(k, dtype=dtype))}


def classify(params: dict, name: str, feats: Tensor, out_h: int, out_w: int) -> Tensor:
    """1x1 logits, bilinear upsample, per-pixel softmax."""
    logits = T.conv1x1(feats, params[f"{name}.w"], params[f"{name}.b"])
    return T.softmax_channels(T.bilinear_resize(logits, out_h, out_w))


def fuse_and_classify(params: dict, c_wi: Tensor, c_bi: Tensor, out_h: int, out_w: int,
                      name: str = "cls") -> Tensor:
    if c_wi.shape != c_bi.shape:
        raise ShapeError(f"context and refined features differ: {c_wi.shape} vs {c_bi.shape}")
    return classify(params, name, T.concat_channels(c_wi, c_bi), out_h, out_w)
