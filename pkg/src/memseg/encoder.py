"""Toy convolutional backbone with four output levels at strides 4/8/16/32."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, substream
from .tensor import ShapeError, Tensor


@dataclass
class MultiLevelFeatures:
    x1: Tensor
    x2: Tensor
    x3: Tensor
    x4: Tensor

    def levels(self):
        return (self.x1, self.x2, self.x3, self.x4)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def conv3x3_param(rng, c_in, c_out, dtype):
    return glorot(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9, dtype)


def conv1x1_param(rng, c_in, c_out, dtype):
    return glorot(rng, (c_out, c_in), c_in, c_out, dtype)


# (name, stride) for each conv in order; the stage output is taken after the last conv
_LAYOUT = (
    ("stem1", 2), ("stem2", 2),
    ("s2a", 2), ("s2b", 1),
    ("s3a", 2), ("s3b", 1),
    ("s4a", 2), ("s4b", 1),
)


def _layer_channels(cfg: ModelConfig):
    c1, c2, c3, c4 = cfg.channels
    return {
        "stem1": (3, c1), "stem2": (c1, c1),
        "s2a": (c1, c2), "s2b": (c2, c2),
        "s3a": (c2, c3), "s3b": (c3, c3),
        "s4a": (c3, c4), "s4b": (c4, c4),
    }


def init_encoder(seed: int, cfg: ModelConfig) -> dict:
    """Glorot-uniform kernels, zero biases; a pure function of (seed, cfg)."""
    cfg.validate()
    rng = substream(seed, "encoder")
    chans = _layer_channels(cfg)
    params = {}
    for name, _ in _LAYOUT:
        c_in, c_out = chans[name]
        params[f"encoder.{name}.w"] = T.parameter(conv3x3_param(rng, c_in, c_out, cfg.dtype))
        params[f"encoder.{name}.b"] = T.parameter(np.zeros(c_out, dtype=cfg.dtype))
    return params


def encode(params: dict, image) -> MultiLevelFeatures:
    """Run the backbone on (..., 3, H, W) with H, W divisible by 32."""
    image = T.as_tensor(image)
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"encoder input spatial dims must be divisible by 32, got {h}x{w}")
    x = image
    outs = {}
    for name, stride in _LAYOUT:
        x = T.relu(T.conv3x3(x, params[f"encoder.{name}.w"], params[f"encoder.{name}.b"], stride))
        outs[name] = x
    return MultiLevelFeatures(outs["stem2"], outs["s2b"], outs["s3b"], outs["s4b"])
