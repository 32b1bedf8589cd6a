"""Dense tensors with taped reverse-mode differentiation.

Arrays are numpy, row-major.  A ``Tape`` records every primitive applied
while it is active; ``backward`` replays the recorded adjoints in reverse
creation order, which is a reverse topological order of the graph, so each
node is visited exactly once with its output adjoint fully accumulated.

Default dtype is float64 so finite-difference checks have clean tolerances;
float32 is supported for faster training.  Running without an active tape
gives a plain (gradient-free) forward pass, which is what evaluation uses.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float64

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops, usable as a context manager.

    Each node is ``(out, inputs, vjp)`` where ``vjp`` maps the adjoint of
    ``out`` to a tuple of adjoints aligned with ``inputs`` (``None`` for
    inputs that need no gradient).
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense n-d array, optionally participating in the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; all dispatch to the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)


class Param(Tensor):
    """A named trainable tensor carrying gradient and Adam state."""

    __slots__ = ("name", "moment1", "moment2", "step_count")

    def __init__(self, name, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.moment1 = np.zeros_like(self.data)
        self.moment2 = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, dtype={self.dtype.name})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    """Wrap binary-op operands; bare python scalars adopt the other side's
    dtype so float32 graphs are not silently promoted to float64."""
    if isinstance(a, Tensor):
        if not isinstance(b, Tensor) and np.isscalar(b):
            return a, Tensor(np.asarray(b, dtype=a.dtype))
        return a, as_tensor(b)
    if isinstance(b, Tensor) and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _record(out, inputs, vjp):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, inputs, vjp))
    return out


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``loss`` must be a scalar produced under the given (or active) tape.
    Leaves visited get their adjoint added to ``.grad`` (created on demand
    for plain tensors, accumulated for Params); leaves not reachable from
    ``loss`` are untouched.
    """
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("backward() requires an active Tape")
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    adjoint = {id(loss): (loss, np.ones_like(loss.data))}
    produced = {id(out) for out, _, _ in tape.nodes}
    for out, inputs, vjp in reversed(tape.nodes):
        got = adjoint.pop(id(out), None)
        if got is None:
            continue
        grads = vjp(got[1])
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            prev = adjoint.get(id(t))
            adjoint[id(t)] = (t, g if prev is None else prev[1] + g)
    for t, g in adjoint.values():
        if id(t) in produced:
            continue
        if t.grad is None:
            t.grad = np.array(g, copy=True)
        else:
            t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / broadcasting primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), vjp)


def sub(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), vjp)


def mul(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), vjp)


def div(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data / b.data)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
              if b.requires_grad else None)
        return ga, gb

    return _record(out, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def power(a, p):
    """Elementwise a**p for a python scalar exponent."""
    a = as_tensor(a)
    p = float(p)
    out = Tensor(a.data**p)
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def elu(a):
    a = as_tensor(a)
    pos = a.data > 0.0
    out = Tensor(np.where(pos, a.data, np.expm1(np.minimum(a.data, 0.0))))
    return _record(out, (a,), lambda g: (g * np.where(pos, 1.0, out.data + 1.0),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def clamp_min(a, floor):
    """max(a, floor) for a scalar floor; gradient passes where a > floor."""
    a = as_tensor(a)
    floor = float(floor)
    out = Tensor(np.maximum(a.data, floor))
    return _record(out, (a,), lambda g: (g * (a.data > floor),))


def softmax(a, axis=-1):
    """Stable softmax along ``axis``: rows sum to 1."""
    a = as_tensor(a)
    y = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions / structure
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record(out, (a,), vjp)


def variance(a, axis=None, keepdims=False):
    """Population variance along ``axis``; zero for constant input."""
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    out = Tensor((centered * centered).mean(axis=axis, keepdims=keepdims))
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        if axis is None:
            gg = g
        elif not keepdims:
            gg = np.expand_dims(g, axis)
        else:
            gg = g
        return (2.0 * centered * gg / n,)

    return _record(out, (a,), vjp)


def cumsum(a, axis):
    a = as_tensor(a)
    out = Tensor(np.cumsum(a.data, axis=axis))

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _record(out, (a,), vjp)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = (_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
              if a.requires_grad else None)
        gb = (_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
              if b.requires_grad else None)
        return ga, gb

    return _record(out, (a, b), vjp)


def transpose(a, axes):
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def vjp(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tuple(tensors), vjp)


def getitem(a, key):
    """Basic (int/slice/ellipsis) indexing; adjoint scatters into zeros."""
    a = as_tensor(a)
    out = Tensor(a.data[key])

    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        return (buf,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# image primitives
# ---------------------------------------------------------------------------


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-image, per-channel spatial normalization with learned affine.

    x is (V, H, W, C); mean/variance are taken over the spatial axes.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 1, 2)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 1, 2)) if beta.requires_grad else None
        if not x.requires_grad:
            return None, ggamma, gbeta
        gh = g * gamma.data
        mean_gh = gh.mean(axis=(1, 2), keepdims=True)
        mean_ghx = (gh * xhat).mean(axis=(1, 2), keepdims=True)
        gx = inv * (gh - mean_gh - xhat * mean_ghx)
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), vjp)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution over (V, H, W, Cin) with kernel (kh, kw, Cin, Cout).

    Implemented as im2col + matmul; the adjoint scatters the unfolded
    gradient back with kh*kw strided slice-adds.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    V, H, W_, _ = x.shape
    kh, kw, cin, cout = w.shape
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    Hp, Wp = xp.shape[1], xp.shape[2]
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d input {x.shape} smaller than kernel {w.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::s, ::s]                       # (V, Ho, Wo, Cin, kh, kw)
    Ho, Wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    cols2 = cols.reshape(V * Ho * Wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    y = cols2 @ w2
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
    out = Tensor(y.reshape(V, Ho, Wo, cout))

    def vjp(g):
        g2 = g.reshape(V * Ho * Wo, cout)
        gw = (cols2.T @ g2).reshape(kh, kw, cin, cout)
        dcols = (g2 @ w2.T).reshape(V, Ho, Wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += dcols[:, :, :, i, j, :]
        gx = dxp[:, p:p + H, p:p + W_, :] if p else dxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, vjp)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of (V, H, W, C)."""
    x = as_tensor(x)
    V, H, W_, C = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2))

    def vjp(g):
        return (g.reshape(V, H, 2, W_, 2, C).sum(axis=(2, 4)),)

    return _record(out, (x,), vjp)


def bilinear_sample(fmap, coords):
    """Bilinearly sample a (H, W, C) map at fractional (x, y) pixel coords.

    ``coords`` has shape (..., 2) with x along width and y along height,
    pixel centers at integer coordinates.  Coordinates are border-clamped to
    the valid square; gradients flow to both the map and the coordinates
    (zero coordinate-gradient in the clamped region).
    """
    fmap, coords = as_tensor(fmap), as_tensor(coords)
    if fmap.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample expects (H,W,C) and (...,2), got {fmap.shape}, {coords.shape}")
    H, W_, C = fmap.shape
    x = coords.data[..., 0]
    y = coords.data[..., 1]
    xc = np.clip(x, 0.0, W_ - 1.0)
    yc = np.clip(y, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(xc), W_ - 2).astype(np.int64) if W_ > 1 else np.zeros_like(xc, dtype=np.int64)
    y0 = np.minimum(np.floor(yc), H - 2).astype(np.int64) if H > 1 else np.zeros_like(yc, dtype=np.int64)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    flat = fmap.data.reshape(H * W_, C)
    i00 = y0 * W_ + x0
    v00 = flat[i00]
    v01 = flat[i00 + (1 if W_ > 1 else 0)]
    v10 = flat[i00 + (W_ if H > 1 else 0)]
    v11 = flat[i00 + ((W_ + 1) if (H > 1 and W_ > 1) else 0)]
    out = Tensor((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11))

    def vjp(g):
        gmap = None
        if fmap.requires_grad:
            # bincount scatter: one flat weighted histogram per corner
            buf = np.zeros(H * W_ * C)
            cols = np.arange(C, dtype=np.int64)
            for base, wgt in ((i00, (1 - fy) * (1 - fx)),
                              (i00 + (1 if W_ > 1 else 0), (1 - fy) * fx),
                              (i00 + (W_ if H > 1 else 0), fy * (1 - fx)),
                              (i00 + ((W_ + 1) if (H > 1 and W_ > 1) else 0), fy * fx)):
                flat_idx = (base[..., None] * C + cols).reshape(-1)
                buf += np.bincount(flat_idx, weights=(g * wgt).reshape(-1).astype(np.float64),
                                   minlength=H * W_ * C)
            gmap = buf.reshape(fmap.shape).astype(fmap.dtype, copy=False)
        if not coords.requires_grad:
            return gmap, None
        dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        gx = (g * dx).sum(axis=-1) * ((x >= 0.0) & (x <= W_ - 1.0))
        gy = (g * dy).sum(axis=-1) * ((y >= 0.0) & (y <= H - 1.0))
        return gmap, np.stack([gx, gy], axis=-1)

    return _record(out, (fmap, coords), vjp)
