"""Dense tensors on numpy with a recorded tape for reverse-mode derivatives.

Spatial tensors are channel-first (..., C, H, W); any leading dims are batch
dims. Every differentiable op records a closure mapping the upstream gradient
to one gradient per parent.
"""
from __future__ import annotations

import contextlib
import threading
from functools import lru_cache

import numpy as np


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if not self.requires_grad:
            raise StateError("backward called on a tensor with no recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward on a non-scalar tensor needs an upstream gradient")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"upstream gradient {grad.shape} does not match {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def parameter(data) -> Tensor:
    return Tensor(np.array(data), requires_grad=True)


def grad(loss: Tensor, params: dict) -> dict:
    """Gradients of a scalar ``loss`` for every tensor in ``params``.

    Parameters that the loss does not depend on get zero gradients.
    """
    for p in params.values():
        p.grad = None
    loss.backward()
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data * s, (a,), lambda g: (g * s,))
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = None
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def index(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[i] = g
        return (out,)

    return _result(x.data[i], (x,), back)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _result(ad @ bd, (a, b), back)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), back)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of (..., K, H, W)."""
    nd = x.ndim
    moved = transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3))
    sm = softmax_rows(moved)
    return transpose(sm, tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2))


# ---------------------------------------------------------------- convolutions


def conv1x1(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel affine map (..., C_in, H, W) -> (..., C_out, H, W)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv1x1 channel mismatch: input {x.shape}, weight {w.shape}")
    *lead, c, h, wd = x.shape
    x2 = x.data.reshape(*lead, c, h * wd)
    wdat = w.data
    out = wdat @ x2
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(*lead, w.shape[0], h, wd)
    parents = (x, w) if bias is None else (x, w, bias)

    def back(g):
        g2 = g.reshape(*lead, w.shape[0], h * wd)
        gx = (wdat.T @ g2).reshape(x.shape)
        gw = g2 @ np.swapaxes(x2, -1, -2)
        if gw.ndim > 2:
            gw = gw.reshape(-1, *gw.shape[-2:]).sum(axis=0)
        if bias is None:
            return gx, gw
        gb = g2.reshape(-1, w.shape[0], h * wd).sum(axis=(0, 2))
        return gx, gw, gb

    return _result(out, parents, back)


def conv3x3(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1; output spatial = ceil(in/stride)."""
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ConfigError(f"unsupported stride {stride}; expected 1 or 2")
    if w.shape[-2:] != (3, 3) or w.ndim != 4:
        raise ConfigError(f"conv3x3 needs a (C_out, C_in, 3, 3) kernel, got {w.shape}")
    if x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv3x3 channel mismatch: input {x.shape}, weight {w.shape}")
    *lead, c, h, wd = x.shape
    ho, wo = -(-h // stride), -(-wd // stride)
    pad = [(0, 0)] * len(lead) + [(0, 0), (1, 1), (1, 1)]
    xp = np.pad(x.data, pad)
    cols = np.empty((*lead, c, 9, ho, wo), dtype=x.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for dy in range(3):
        for dx in range(3):
            cols[..., dy * 3 + dx, :, :] = xp[..., dy:dy + span_h:stride, dx:dx + span_w:stride]
    cols = cols.reshape(*lead, c * 9, ho * wo)
    cout = w.shape[0]
    w2 = w.data.reshape(cout, c * 9)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(*lead, cout, ho, wo)
    parents = (x, w) if bias is None else (x, w, bias)

    def back(g):
        g2 = g.reshape(*lead, cout, ho * wo)
        gw = g2 @ np.swapaxes(cols, -1, -2)
        if gw.ndim > 2:
            gw = gw.reshape(-1, cout, c * 9).sum(axis=0)
        gcols = (w2.T @ g2).reshape(*lead, c, 9, ho, wo)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for dy in range(3):
            for dx in range(3):
                gxp[..., dy:dy + span_h:stride, dx:dx + span_w:stride] += gcols[..., dy * 3 + dx, :, :]
        gx = gxp[..., 1:-1, 1:-1]
        res = (gx, gw.reshape(w.shape))
        if bias is not None:
            res += (g2.reshape(-1, cout, ho * wo).sum(axis=(0, 2)),)
        return res

    return _result(out, parents, back)


# ---------------------------------------------------------------- resampling


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) * n_in / n_out - 0.5, clamped at 0
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def _avgpool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -(-((i + 1) * n_in) // n_out)
        m[i, start:end] = 1.0 / (end - start)
    m.setflags(write=False)
    return m


def _apply_separable(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    *lead, h, w = x.shape
    n = int(np.prod(lead, dtype=np.int64))
    t = x.reshape(n * h, w) @ cols.T                        # (n*h, W)
    t = t.reshape(n, h, -1).transpose(1, 0, 2).reshape(h, -1)  # (h, n*W)
    out = (rows @ t).reshape(rows.shape[0], n, -1).transpose(1, 0, 2)
    return out.reshape(*lead, rows.shape[0], cols.shape[0])


def separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``rows @ x @ cols.T`` over the last two axes (fixed linear resampling)."""
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = _apply_separable(x.data, rows, cols)
    return _result(out, (x,), lambda g: (_apply_separable(g, rows.T, cols.T),))


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    return separable(x, _bilinear_matrix(h, out_h), _bilinear_matrix(w, out_w))


def adaptive_avg_pool(x: Tensor, grid: int) -> Tensor:
    h, w = x.shape[-2:]
    return separable(x, _avgpool_matrix(h, grid), _avgpool_matrix(w, grid))


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)


def nearest_resize(x, out_h: int, out_w: int):
    """Nearest-neighbour resize over the last two axes; works on arrays or tensors.

    Source index is floor(dst * in / out). Not differentiable.
    """
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    h, w = arr.shape[-2:]
    if (h, w) != (out_h, out_w):
        arr = arr[..., nearest_indices(h, out_h)[:, None], nearest_indices(w, out_w)[None, :]]
    return Tensor(arr) if isinstance(x, Tensor) else arr


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    if b.shape[-3] == 0:
        return a
    return concat([a, b], axis=a.ndim - 3)


def hflip(x):
    if isinstance(x, Tensor):
        return _result(x.data[..., ::-1].copy(), (x,), lambda g: (g[..., ::-1].copy(),))
    return np.asarray(x)[..., ::-1].copy()


# ---------------------------------------------------------------- constants / losses


def cosine_similarity(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Cosine similarity of each row of ``a`` (N, C) with ``b`` (C,).

    Rows or ``b`` with norm below ``eps`` give similarity 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = float(np.sqrt(b @ b))
    if nb < eps:
        return np.zeros(a.shape[0])
    ok = na >= eps
    out = np.where(ok, (a @ b) / (np.where(ok, na, 1.0) * nb), 0.0)
    return np.clip(out, -1.0, 1.0)


def nll_of_probs(probs: Tensor, labels: np.ndarray, ignore_index: int = 255,
                 floor: float = 1e-12) -> Tensor:
    """Mean of -log p[label] over non-ignored pixels.

    ``probs`` is (..., K, H, W), ``labels`` is (..., H, W). Probabilities are
    clamped at ``floor``; clamped entries pass no gradient.
    """
    labels = np.asarray(labels)
    k = probs.shape[-3]
    valid = labels != ignore_index
    n = int(valid.sum())
    if n == 0:
        return _result(np.asarray(0.0, dtype=probs.dtype), (probs,), lambda g: (np.zeros_like(probs.data),))
    safe = np.where(valid, labels, 0).astype(np.int64)
    idx = np.expand_dims(safe, -3)
    picked = np.take_along_axis(probs.data, idx, axis=-3)
    vmask = np.expand_dims(valid, -3)
    clamped = np.maximum(np.where(vmask, picked, 1.0), floor)
    loss = -np.log(clamped).sum() / n
    dpicked = np.where(vmask & (picked >= floor), -1.0 / clamped, 0.0) / n

    def back(gout):
        out = np.zeros_like(probs.data)
        np.put_along_axis(out, idx, (gout * dpicked).astype(probs.dtype), axis=-3)
        return (out,)

    return _result(np.asarray(loss, dtype=probs.dtype), (probs,), back)


# ---------------------------------------------------------------- serialization

MAGIC = b"MSTF"
BUNDLE_MAGIC = b"MSTB"


def _pack_tensor(arr) -> bytes:
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    head = MAGIC + np.array([arr.ndim, *arr.shape], dtype="<u4").tobytes()
    return head + arr.tobytes()


def _unpack_tensor(buf: bytes, pos: int, where: str = "<buffer>"):
    if buf[pos:pos + 4] != MAGIC:
        raise OSError(f"{where}: bad tensor magic at offset {pos}")
    pos += 4
    if len(buf) < pos + 4:
        raise OSError(f"{where}: truncated tensor header")
    rank = int(np.frombuffer(buf, "<u4", 1, pos)[0])
    pos += 4
    if len(buf) < pos + 4 * rank:
        raise OSError(f"{where}: truncated tensor header")
    dims = tuple(int(d) for d in np.frombuffer(buf, "<u4", rank, pos))
    pos += 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) < pos + 4 * n:
        raise OSError(f"{where}: truncated tensor data")
    arr = np.frombuffer(buf, "<f4", n, pos).reshape(dims).astype(np.float32)
    return arr, pos + 4 * n


def save_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        f.write(_pack_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = _unpack_tensor(buf, 0, str(path))
    if end != len(buf):
        raise OSError(f"{path}: trailing bytes after tensor")
    return arr


def save_bundle(path, sections: dict, meta: dict | None = None) -> None:
    """Named tensors plus a JSON header in one file.

    Layout: ``MSTB``, u32 meta length, UTF-8 JSON meta, u32 section count, then
    per section: u32 name length, UTF-8 name, one ``MSTF`` tensor record.
    """
    import json

    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [BUNDLE_MAGIC, np.array([len(meta_bytes)], "<u4").tobytes(), meta_bytes,
             np.array([len(sections)], "<u4").tobytes()]
    for name in sections:
        nb = name.encode()
        parts += [np.array([len(nb)], "<u4").tobytes(), nb, _pack_tensor(sections[name])]
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_bundle(path):
    import json

    with open(path, "rb") as f:
        buf = f.read()
    where = str(path)
    if buf[:4] != BUNDLE_MAGIC:
        raise OSError(f"{where}: not a tensor bundle")
    try:
        pos = 4
        mlen = int(np.frombuffer(buf, "<u4", 1, pos)[0])
        pos += 4
        meta = json.loads(buf[pos:pos + mlen].decode())
        pos += mlen
        count = int(np.frombuffer(buf, "<u4", 1, pos)[0])
        pos += 4
        sections = {}
        for _ in range(count):
            nlen = int(np.frombuffer(buf, "<u4", 1, pos)[0])
            pos += 4
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            sections[name], pos = _unpack_tensor(buf, pos, where)
    except (ValueError, UnicodeDecodeError) as exc:
        raise OSError(f"{where}: corrupt bundle ({exc})") from exc
    return sections, meta
