"""Dataset-level class memory: initialization, transform, moving-average update, gather.

The memory never takes part in differentiation; everything here works on
plain numpy arrays.
"""
from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .tensor import ShapeError

log = logging.getLogger(__name__)

IGNORE = 255


class FeatureMemory:
    """K x C class representation matrix with its momentum schedule and step counter."""

    def __init__(self, matrix, momentum: float = 0.1, mode: str = "constant",
                 power: float = 0.9, total_steps: int = 1, t: int = 0):
        self.matrix = np.array(matrix, dtype=np.asarray(matrix).dtype if np.asarray(matrix).dtype.kind == "f" else np.float64)
        if self.matrix.ndim != 2:
            raise ShapeError(f"memory matrix must be K x C, got {self.matrix.shape}")
        if mode not in ("constant", "poly"):
            raise ValueError(f"unknown momentum mode {mode!r}")
        self.momentum = float(momentum)
        self.mode = mode
        self.power = float(power)
        self.total_steps = max(int(total_steps), 1)
        self.t = int(t)

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def copy(self) -> "FeatureMemory":
        return FeatureMemory(self.matrix.copy(), self.momentum, self.mode, self.power,
                             self.total_steps, self.t)

    def current_momentum(self) -> float:
        if self.mode == "constant":
            return self.momentum
        frac = min(self.t / self.total_steps, 1.0)
        return self.momentum * (1.0 - frac) ** self.power

    def blend(self, target: np.ndarray) -> "FeatureMemory":
        """One moving-average step toward ``target`` (K x C); advances ``t`` by one."""
        target = np.asarray(target)
        if target.shape != self.matrix.shape:
            raise ShapeError(f"memory target {target.shape} does not match {self.matrix.shape}")
        m = self.current_momentum()
        self.matrix = (self.matrix + m * (target - self.matrix)).astype(self.matrix.dtype)
        self.t += 1
        return self

    def update(self, reps, labels, transform_mode: str = "upsample") -> "FeatureMemory":
        """Blend toward the batch-averaged transform of ``reps`` under ``labels``.

        ``reps`` is (C, h, w) or (N, C, h, w); ``labels`` is (H, W) or (N, H, W).
        """
        reps = np.asarray(reps)
        labels = np.asarray(labels)
        if reps.ndim == 3:
            reps, labels = reps[None], labels[None]
        targets = [transform(r, g, self.matrix, transform_mode) for r, g in zip(reps, labels)]
        return self.blend(np.mean(targets, axis=0))

    def state(self):
        meta = {"K": self.num_classes, "C": self.dim, "t": self.t, "momentum": self.momentum,
                "mode": self.mode, "power": self.power, "total_steps": self.total_steps}
        return self.matrix, meta

    @classmethod
    def from_state(cls, matrix, meta, dtype=None) -> "FeatureMemory":
        matrix = np.asarray(matrix, dtype=dtype or np.asarray(matrix).dtype)
        if matrix.shape != (meta["K"], meta["C"]):
            raise ShapeError(f"memory shape {matrix.shape} disagrees with header K={meta['K']} C={meta['C']}")
        return cls(matrix, meta["momentum"], meta["mode"], meta["power"], meta["total_steps"], meta["t"])

    def save(self, path) -> None:
        matrix, meta = self.state()
        T.save_bundle(path, {"memory": matrix}, {"memory": meta})

    @classmethod
    def load(cls, path) -> "FeatureMemory":
        sections, meta = T.load_bundle(path)
        return cls.from_state(sections["memory"], meta["memory"])


def update_memory(memory: FeatureMemory, r_prev, gt_prev, transform_mode: str = "upsample") -> FeatureMemory:
    return memory.update(r_prev, gt_prev, transform_mode)


def _check_labels(labels: np.ndarray, k: int) -> None:
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"labels outside [0, {k}) and not {IGNORE}: {np.unique(labels[bad]).tolist()}")


def flatten_reps(r: np.ndarray, labels: np.ndarray, mode: str = "upsample"):
    """Pair each pixel representation with its label as (HW x C, HW)."""
    r = np.asarray(r, dtype=np.float64)
    c, h, w = r.shape
    gh, gw = labels.shape
    if mode == "upsample":
        r = T.bilinear_resize(T.Tensor(r), gh, gw).data
        return r.reshape(c, gh * gw).T, labels.reshape(-1)
    if mode == "nearest":
        small = T.nearest_resize(labels, h, w)
        return r.reshape(c, h * w).T, small.reshape(-1)
    raise ValueError(f"unknown transform mode {mode!r}")


def transform(r, labels, matrix, mode: str = "upsample") -> np.ndarray:
    """Per-class candidate rows for the memory (K x C).

    Rows start as the current memory. For every class present in ``labels``
    the row becomes a weighted average of that class's pixel representations,
    each weighted by (1 - cosine similarity to the memory row) and normalized.
    If every weight is zero the plain mean is used.
    """
    matrix = np.asarray(matrix)
    labels = np.asarray(labels)
    k = matrix.shape[0]
    _check_labels(labels, k)
    out = matrix.astype(np.float64).copy()
    flat, lab = flatten_reps(r, labels, mode)
    keep = lab != IGNORE
    flat, lab = flat[keep], lab[keep].astype(np.int64)
    if lab.size == 0:
        return out.astype(matrix.dtype)
    mem = out[lab]
    norm_r = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    norm_m = np.sqrt(np.einsum("ij,ij->i", mem, mem))
    ok = (norm_r >= 1e-12) & (norm_m >= 1e-12)
    dots = np.einsum("ij,ij->i", flat, mem)
    sims = np.clip(np.where(ok, dots / np.where(ok, norm_r * norm_m, 1.0), 0.0), -1.0, 1.0)
    weights = 1.0 - sims
    counts = np.bincount(lab, minlength=k)
    denom = np.bincount(lab, weights, minlength=k)
    present = counts > 0
    # all-zero weights for a class fall back to its plain mean
    degenerate = present & (denom < 1e-12)
    weights = np.where(degenerate[lab], 1.0, weights)
    denom = np.where(degenerate, counts, denom)
    scatter = np.zeros((k, lab.size))
    scatter[lab, np.arange(lab.size)] = weights
    sums = scatter @ flat
    out[present] = sums[present] / denom[present, None]
    return out.astype(matrix.dtype)


def gather(memory, labels, h: int, w: int) -> np.ndarray:
    """Look up one memory row per pixel of ``labels`` shrunk to h x w.

    ``labels`` is (H, W) or (N, H, W); result is (C, h, w) or (N, C, h, w).
    Ignore-label pixels get a zero vector.
    """
    matrix = memory.matrix if isinstance(memory, FeatureMemory) else np.asarray(memory)
    labels = np.asarray(labels)
    k = matrix.shape[0]
    _check_labels(labels, k)
    small = T.nearest_resize(labels, h, w).astype(np.int64)
    ignored = small == IGNORE
    rows = matrix[np.where(ignored, 0, small)]
    rows[ignored] = 0
    return np.moveaxis(rows, -1, -3)


def init_memory(samples, num_classes: int, dim: int, rng: np.random.Generator,
                dtype=np.float64, **schedule) -> FeatureMemory:
    """Pick one stride-8 pixel representation per class, uniformly over one pass.

    ``samples`` yields (reps (C, h, w), labels (H, W)); labels are shrunk to
    h x w by nearest neighbour. Classes never seen fall back to U(-0.1, 0.1).
    """
    matrix = np.zeros((num_classes, dim), dtype=dtype)
    seen = np.zeros(num_classes, dtype=np.int64)
    for r, labels in samples:
        r = np.asarray(r)
        c, h, w = r.shape
        small = T.nearest_resize(np.asarray(labels), h, w).reshape(-1)
        flat = r.reshape(c, h * w).T
        for cls in range(num_classes):
            idx = np.flatnonzero(small == cls)
            if idx.size == 0:
                continue
            seen[cls] += idx.size
            # reservoir step: the new pixels win with probability m / total
            if rng.random() < idx.size / seen[cls]:
                matrix[cls] = flat[idx[rng.integers(idx.size)]]
    for cls in np.flatnonzero(seen == 0):
        log.warning("class %d never observed while initializing memory; using random row", cls)
        matrix[cls] = rng.uniform(-0.1, 0.1, size=dim)
    return FeatureMemory(matrix, **schedule)
