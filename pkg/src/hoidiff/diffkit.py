"""Minimal dense float32 tensor substrate with reverse-mode differentiation.

Tensors wrap contiguous numpy float32 buffers. Operations compute forward
values immediately; when a Tape is active and an input requires gradients,
a backward rule is recorded on the tape (a Wengert list). Gradients are
accumulated in reverse recording order, which is a valid reverse topological
order and gives a fixed, deterministic reduction order.

No broadcasting tricks beyond numpy semantics; everything stays on CPU.
"""

from __future__ import annotations

import struct

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class CheckpointFormatError(ValueError):
    """Raised when a weight checkpoint file cannot be parsed."""


def _f32(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """Immutable dense float32 value; arithmetic records onto the active tape."""

    __slots__ = ("values", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = _f32(values)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class _Node:
    """One recorded operation: inputs and the rule pushing grads back to them."""

    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Records the operation graph for one forward pass.

    Use as a context manager; nested tapes are allowed (ops record onto the
    innermost one). Backward visits nodes in reverse recording order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> "GradMap":
        """Accumulate d(loss)/d(tensor) for every tensor reachable from loss.

        loss must be scalar (a 0-d or single-element tensor).
        """
        if loss.values.size != 1:
            raise ShapeMismatchError(
                f"backward requires a scalar loss, got shape {loss.values.shape}"
            )
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        keep: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            g_inputs = node.backward(g_out)
            for inp, g in zip(node.inputs, g_inputs):
                if g is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                if prev is None:
                    grads[id(inp)] = g
                    keep[id(inp)] = inp
                else:
                    grads[id(inp)] = prev + g
        return GradMap(grads)


class GradMap:
    """Lookup of accumulated gradients; disconnected tensors get zeros."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def of(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.values)
        return g.astype(np.float32, copy=False)


def _record(out: Tensor, inputs: tuple, backward) -> Tensor:
    """Attach a backward rule to out if a tape is active and grads are needed."""
    if _TAPES and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(_Node(out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values + b.values)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values - b.values)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values * b.values)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g * b.values, a.values.shape),
        _unbroadcast(g * a.values, b.values.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values / b.values)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g / b.values, a.values.shape),
        _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape)))


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(np.maximum(a.values, b.values))
    mask = (a.values >= b.values).astype(np.float32)  # ties route to a
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g * mask, a.values.shape),
        _unbroadcast(g * (1.0 - mask), b.values.shape)))


def clamp_min(a, floor: float) -> Tensor:
    return maximum(a, Tensor(np.float32(floor)))


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.values)
    return _record(out, (a,), lambda g: (-g,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.abs(a.values))
    sign = np.sign(a.values)  # subgradient 0 at exactly 0
    return _record(out, (a,), lambda g: (g * sign,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    y = np.sqrt(a.values)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (0.5 / np.maximum(y, 1e-12)),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.values)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.values))
    return _record(out, (a,), lambda g: (g / a.values,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sin(a.values))
    return _record(out, (a,), lambda g: (g * np.cos(a.values),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.cos(a.values))
    return _record(out, (a,), lambda g: (-g * np.sin(a.values),))


def pow_const(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.values ** p)
    return _record(out, (a,), lambda g: (g * p * a.values ** (p - 1.0),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.values))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.values))
    out = Tensor(a.values * s)
    return _record(out, (a,), lambda g: (g * (s * (1.0 + a.values * (1.0 - s))),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.values, 0.0))
    mask = (a.values > 0.0).astype(np.float32)
    return _record(out, (a,), lambda g: (g * mask,))


def stop_gradient(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.values.copy())


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.values.shape
    out = Tensor(a.values.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.ascontiguousarray(np.transpose(a.values, axes)))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _record(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), backward)


def stack(parts, axis: int = 0) -> Tensor:
    parts = [reshape(p, p.values.shape[:axis] + (1,) + p.values.shape[axis:])
             for p in (_as_tensor(p) for p in parts)]
    return concat(parts, axis=axis)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    index = [slice(None)] * a.values.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(np.ascontiguousarray(a.values[index]))

    def backward(g):
        full = np.zeros_like(a.values)
        full[index] = g
        return (full,)

    return _record(out, (a,), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along axis with a constant integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    out = Tensor(np.take(a.values, idx, axis=axis))

    def backward(g):
        full = np.zeros_like(a.values)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record(out, (a,), backward)


def embedding_lookup(table, ids) -> Tensor:
    """Rows of table selected by integer ids; duplicate ids accumulate grads."""
    return take(table, np.asarray(ids, dtype=np.int64), axis=0)


def where_mask(mask, a, b) -> Tensor:
    """Select a where mask else b; mask is a constant boolean array."""
    a, b = _as_tensor(a), _as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(m, a.values, b.values))
    mf = m.astype(np.float32)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g * mf, a.values.shape),
        _unbroadcast(g * (1.0 - mf), b.values.shape)))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.values.shape).astype(np.float32),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.values.shape).astype(np.float32),)

    return _record(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.values.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.values.shape[i] for i in axis]))
    else:
        count = a.values.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def _reduce_extreme(a, axis, argfn, npfn):
    a = _as_tensor(a)
    out = Tensor(npfn(a.values, axis=axis))
    win = argfn(a.values, axis=axis)  # first occurrence wins ties

    def backward(g):
        full = np.zeros_like(a.values)
        np.put_along_axis(full, np.expand_dims(win, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (a,), backward)


def reduce_max(a, axis: int) -> Tensor:
    """Max along axis; gradient flows to the first (lowest index) maximum."""
    return _reduce_extreme(a, axis, np.argmax, np.max)


def reduce_min(a, axis: int) -> Tensor:
    """Min along axis; gradient flows to the first (lowest index) minimum."""
    return _reduce_extreme(a, axis, np.argmin, np.min)


# ---------------------------------------------------------------------------
# linear algebra and network ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else -1]:
        raise ShapeMismatchError(
            f"matmul inner dimensions differ: {av.shape} @ {bv.shape}")
    out = Tensor(np.matmul(av, bv))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2)) if bv.ndim > 1 else np.multiply.outer(g, bv)
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return _record(out, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), backward)


def group_norm(x, num_groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Group normalization over a (C, F) feature map with per-channel affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c, f = x.values.shape
    if c % num_groups != 0:
        raise ShapeMismatchError(
            f"channels {c} not divisible by {num_groups} groups")
    xg = x.values.reshape(num_groups, -1)  # (G, C/G * F)
    mean = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(c, f)
    y = xhat * gamma.values[:, None] + beta.values[:, None]
    out = Tensor(y)

    def backward(g):
        dgamma = (g * xhat).sum(axis=1)
        dbeta = g.sum(axis=1)
        dxhat = (g * gamma.values[:, None]).reshape(num_groups, -1)
        xh = xhat.reshape(num_groups, -1)
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xh).mean(axis=1, keepdims=True)
        dx = (inv * (dxhat - m1 - xh * m2)).reshape(c, f)
        return (dx.astype(np.float32), dgamma.astype(np.float32),
                dbeta.astype(np.float32))

    return _record(out, (x, gamma, beta), backward)


def conv1d(x, w, b) -> Tensor:
    """Temporal convolution: x (Cin, F), w (Cout, Cin, k) odd k, b (Cout,).

    Stride 1, zero same-padding; output (Cout, F).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    cin, f = x.values.shape
    cout, cin_w, k = w.values.shape
    if cin_w != cin:
        raise ShapeMismatchError(
            f"conv1d channel mismatch: input {x.values.shape}, weight {w.values.shape}")
    if k % 2 != 1:
        raise ShapeMismatchError(f"conv1d kernel width must be odd, got {k}")
    pad = k // 2
    xp = np.pad(x.values, ((0, 0), (pad, pad)))
    y = np.zeros((cout, f), dtype=np.float32)
    for tap in range(k):
        y += w.values[:, :, tap] @ xp[:, tap:tap + f]
    y += b.values[:, None]
    out = Tensor(y)

    def backward(g):
        dw = np.zeros_like(w.values)
        dxp = np.zeros_like(xp)
        for tap in range(k):
            dw[:, :, tap] = g @ xp[:, tap:tap + f].T
            dxp[:, tap:tap + f] += w.values[:, :, tap].T @ g
        dx = dxp[:, pad:pad + f] if pad else dxp
        return (np.ascontiguousarray(dx), dw, g.sum(axis=1))

    return _record(out, (x, w, b), backward)


def pairwise_min_distance(a, b) -> Tensor:
    """Per-row minimum Euclidean distance: a (..., M, 3), b (..., N, 3) -> (..., M).

    Ties pick the lowest index of b. Gradient is that of the winning pair
    (the true subgradient); it is defined as zero at coincident points.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    diff = av[..., :, None, :] - bv[..., None, :, :]  # (..., M, N, 3)
    d2 = (diff * diff).sum(axis=-1)
    win = d2.argmin(axis=-1)  # (..., M)
    dmin = np.sqrt(np.take_along_axis(d2, win[..., None], axis=-1)[..., 0])
    out = Tensor(dmin)

    def backward(g):
        wdiff = np.take_along_axis(diff, win[..., None, None], axis=-2)[..., 0, :]
        safe = np.where(dmin > 0.0, dmin, 1.0)
        unit = np.where(dmin[..., None] > 0.0, wdiff / safe[..., None], 0.0)
        ga = g[..., None] * unit  # (..., M, 3)
        gb = np.zeros_like(bv)
        flat_gb = gb.reshape(-1, bv.shape[-2], 3)
        flat_win = win.reshape(flat_gb.shape[0], -1)
        flat_ga = ga.reshape(flat_gb.shape[0], -1, 3)
        for i in range(flat_gb.shape[0]):
            np.add.at(flat_gb[i], flat_win[i], -flat_ga[i])
        return (ga.astype(np.float32), gb.astype(np.float32))

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# weight checkpoint format
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CGW1"


def save_weights(path, named: dict) -> None:
    """Write named float32 arrays: magic, count, then (name, rank, dims, data).

    Arrays are written sorted by name so files are byte-stable.
    """
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(named)))
        for name in sorted(named):
            arr = named[name]
            values = arr.values if isinstance(arr, Tensor) else _f32(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", values.ndim))
            for dim in values.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(values.astype("<f4").tobytes())


def load_weights(path) -> dict:
    """Read a checkpoint written by save_weights; returns name -> float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic: {blob[:4]!r}")
    off = 4
    try:
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        named = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            off += 4 * n
            named[name] = data.reshape(dims).astype(np.float32)
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from exc
    if off != len(blob):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return named
