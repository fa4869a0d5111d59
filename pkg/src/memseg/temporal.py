"""Rolling buffer of recent-frame features and attention of the current frame over it."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .attention import project, tokens, untokens
from .tensor import ShapeError, Tensor


class TemporalMemory:
    """Up to ``capacity`` stride-8 feature maps, oldest first."""

    def __init__(self, capacity: int = 2, buffer=None):
        if capacity < 1:
            raise ValueError("temporal memory capacity must be >= 1")
        self.capacity = capacity
        self.buffer = [np.asarray(b) for b in (buffer or [])][-capacity:]

    def __len__(self) -> int:
        return len(self.buffer)

    def push(self, feat) -> "TemporalMemory":
        """New memory with ``feat`` appended and the oldest entry evicted past capacity."""
        feat = np.array(feat.data if isinstance(feat, Tensor) else feat)
        if self.buffer and self.buffer[0].shape != feat.shape:
            raise ShapeError(f"temporal memory holds {self.buffer[0].shape}, got {feat.shape}")
        return TemporalMemory(self.capacity, (self.buffer + [feat])[-self.capacity:])


def attend(params: dict, prefix: str, mem: TemporalMemory, current) -> Tensor:
    """Residual single-head attention from ``current`` over all buffered pixels.

    An empty buffer returns ``current`` unchanged.
    """
    current = T.as_tensor(current)
    if len(mem) == 0:
        return current
    if mem.buffer[0].shape != current.shape:
        raise ShapeError(f"temporal memory holds {mem.buffer[0].shape}, current is {current.shape}")
    c, h, w = current.shape[-3:]
    q = tokens(project(params, prefix, "q", current))
    past = T.Tensor(np.stack(mem.buffer, axis=-4).astype(current.dtype, copy=False))
    # (..., L, C/2, h, w) -> (..., L*hw, C/2)
    k = tokens(project(params, prefix, "k", past))
    v = tokens(project(params, prefix, "v", past))
    lead = k.shape[:-3]
    k = T.reshape(k, (*lead, -1, k.shape[-1]))
    v = T.reshape(v, (*lead, -1, v.shape[-1]))
    o = T.softmax_rows(T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(c / 2)))
    attended = project(params, prefix, "o", untokens(T.matmul(o, v), h, w))
    return current + attended
