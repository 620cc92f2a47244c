"""Dense-tensor engine with reverse-mode automatic differentiation.

Data lives in row-major numpy buffers (float32 for training, float64 for
gradient checking). Every op records its parents and a backward rule; calling
``backward()`` on a scalar replays the rules in reverse topological order.
Tensors are immutable after construction except for their grad buffers.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class DomainError(ValueError):
    """Operand values outside an op's mathematical domain (log <= 0, div by 0)."""


_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / frozen towers)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._done = False

    # -- basic introspection ------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph machinery ----------------------------------------------------

    def backward(self, accumulate: bool = False):
        """Populate ``grad`` on every requires_grad ancestor of this scalar.

        A second call on the same loss raises unless ``accumulate=True``, in
        which case gradient contributions add onto the existing buffers.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if self._done and not accumulate:
            raise RuntimeError("backward() already ran for this loss; pass accumulate=True to add")
        self._done = True

        order = _toposort(self)
        # Interior grads are transient per-replay scratch; only leaves carry
        # gradients across calls (and only when accumulate=True).
        for node in order:
            if node._backward_fn is not None or not accumulate:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            fn = node._backward_fn
            if fn is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, fn(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None or g is node.grad else g
                else:
                    parent.grad += g


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; parent order is fixed, so replay order is deterministic.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._done = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise TypeError(f"mixed dtypes {x.dtype} and {like.dtype}; cast explicitly")
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    if (b.data == 0).any():
        raise DomainError("division by zero")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p != int(p) and (a.data < 0).any():
        raise DomainError(f"power({p}) of negative values")
    out = a.data ** np.asarray(p, dtype=a.dtype)
    return _make(out, (a,), lambda g: (g * p * a.data ** np.asarray(p - 1, dtype=a.dtype),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError("log of non-positive values")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the where() picks the stable branch per sign.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1 - s)),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|): stable and SIMD-friendly
    out = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),))


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"mixed dtypes {a.dtype} and {b.dtype}")

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; subtracts the axis max so any finite input is safe."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


# -- reductions and rearrangement ---------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / np.asarray(count, dtype=x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    dt = tensors[0].dtype
    if any(t.dtype != dt for t in tensors):
        raise TypeError("concat of mixed dtypes")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[idx] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), backward)


def pad2d(x: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Zero-pad the spatial dims of a (B, H, W, C) map."""
    out = np.pad(x.data, ((0, 0), pad_h, pad_w, (0, 0)))
    h, w = x.shape[1], x.shape[2]

    def backward(g):
        return (g[:, pad_h[0]:pad_h[0] + h, pad_w[0]:pad_w[0] + w, :],)

    return _make(out, (x,), backward)


def gather_tokens(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder the token axis of a (B, L, C) sequence by a permutation."""
    inv = np.argsort(perm)
    return _make(np.ascontiguousarray(x.data[:, perm, :]), (x,),
                 lambda g: (np.ascontiguousarray(g[:, inv, :]),))


def take_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a 2-D table; duplicate indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"take_rows wants a 2-D table, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"row index out of range for table {x.shape}")

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), backward)


# -- convolution ----------------------------------------------------------------


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    before = total // 2
    return out, before, total - before


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    kh, kw, ci, co = w.shape
    _, bh, ah = _same_pads(x.shape[1], kh, stride)
    _, bw, aw = _same_pads(x.shape[2], kw, stride)
    xp = np.pad(x, ((0, 0), (bh, ah), (bw, aw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, Ci, kh, kw)
    b, ho, wo = win.shape[:3]
    patches = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * ci)
    y = patches @ w.reshape(kh * kw * ci, co)
    return y.reshape(b, ho, wo, co)


def _conv_dw(x: np.ndarray, g: np.ndarray, w_shape, stride: int) -> np.ndarray:
    kh, kw, ci, co = w_shape
    _, bh, ah = _same_pads(x.shape[1], kh, stride)
    _, bw, aw = _same_pads(x.shape[2], kw, stride)
    xp = np.pad(x, ((0, 0), (bh, ah), (bw, aw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    b, ho, wo = win.shape[:3]
    patches = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * ci)
    dw = patches.T @ g.reshape(b * ho * wo, co)
    return dw.reshape(kh, kw, ci, co)


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    b, h, w, c = g.shape
    out = np.zeros((b, (h - 1) * stride + 1, (w - 1) * stride + 1, c), dtype=g.dtype)
    out[:, ::stride, ::stride] = g
    return out


def _conv_dx(g: np.ndarray, w: np.ndarray, stride: int, x_shape) -> np.ndarray:
    # Gradient w.r.t. the conv input: correlate the zero-dilated output grad
    # with the spatially flipped, channel-swapped kernel.
    kh, kw, ci, co = w.shape
    _, xh, xw, _ = x_shape
    _, bh, ah = _same_pads(xh, kh, stride)
    _, bw, aw = _same_pads(xw, kw, stride)
    gd = _dilate(g, stride)
    gp = np.pad(gd, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    wf = w[::-1, ::-1].transpose(0, 1, 3, 2)  # (kh, kw, Co, Ci)
    win = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
    b, vh, vw = win.shape[:3]
    patches = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * vh * vw, kh * kw * co)
    dxp_part = (patches @ wf.reshape(kh * kw * co, ci)).reshape(b, vh, vw, ci)
    dxp = np.zeros((b, xh + bh + ah, xw + bw + aw, ci), dtype=g.dtype)
    dxp[:, :vh, :vw] = dxp_part[:, :xh + bh + ah, :xw + bw + aw]
    return np.ascontiguousarray(dxp[:, bh:bh + xh, bw:bw + xw, :])


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero 'same' padding; x (B,H,W,Ci), w (kh,kw,Ci,Co)."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kh, kw, ci, _ = w.shape
    if ci != x.shape[3]:
        raise ShapeError(f"conv2d channels: input {x.shape} vs kernel {w.shape}")
    out = _conv_fwd(x.data, w.data, stride)
    if bias is not None:
        out = out + bias.data

    if bias is None:
        def backward(g):
            return (_conv_dx(g, w.data, stride, x.shape),
                    _conv_dw(x.data, g, w.shape, stride))
        return _make(out, (x, w), backward)

    def backward_b(g):
        return (_conv_dx(g, w.data, stride, x.shape),
                _conv_dw(x.data, g, w.shape, stride),
                g.sum(axis=(0, 1, 2)))

    return _make(out, (x, w, bias), backward_b)


def conv2d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed conv: spatial size times ``stride``; x (B,h,w,Ci), w (kh,kw,Co,Ci)."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kh, kw, co, ci = w.shape
    if ci != x.shape[3]:
        raise ShapeError(f"conv2d_transpose channels: input {x.shape} vs kernel {w.shape}")
    b, h, wd, _ = x.shape
    out_shape = (b, h * stride, wd * stride, co)
    # Forward is the adjoint of a stride-s conv that maps (H*s, W*s, co) down to
    # (h, w, ci); in that conv's (kh, kw, in, out) layout the kernel is w itself.
    out = _conv_dx(x.data, w.data, stride, out_shape)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = _conv_fwd(g, w.data, stride)
        gw = _conv_dw(g, x.data, (kh, kw, co, ci), stride)
        gb = g.sum(axis=(0, 1, 2)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    if bias is None:
        return _make(out, parents, lambda g: backward(g)[:2])
    return _make(out, parents, backward)


# -- resampling -----------------------------------------------------------------


def _linear_weights(src: int, dst: int):
    # align_corners=False sample positions, clipped at the borders.
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of a (B, H, W, C) map (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target dims must be >= 1, got {out_h}x{out_w}")
    b, h, w, c = x.shape
    i0, i1, fi = _linear_weights(h, out_h)
    j0, j1, fj = _linear_weights(w, out_w)
    fi_col = fi.astype(x.dtype)[None, :, None, None]
    fj_col = fj.astype(x.dtype)[None, None, :, None]

    rows = x.data[:, i0] * (1 - fi_col) + x.data[:, i1] * fi_col
    out = rows[:, :, j0] * (1 - fj_col) + rows[:, :, j1] * fj_col

    def backward(g):
        g_rows = np.zeros((b, out_h, w, c), dtype=x.dtype)
        np.add.at(g_rows, (slice(None), slice(None), j0), g * (1 - fj_col))
        np.add.at(g_rows, (slice(None), slice(None), j1), g * fj_col)
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(gx, (slice(None), i0), g_rows * (1 - fi_col))
        np.add.at(gx, (slice(None), i1), g_rows * fi_col)
        return (gx,)

    return _make(out, (x,), backward)


# -- composed helpers -------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the channel (last) axis, then apply learnable scale/shift."""
    mu = mean_(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean_(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# -- operator sugar ---------------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: add(neg(self), other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__truediv__ = lambda self, other: div(self, _coerce(other, self))
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__pow__ = lambda self, p: power(self, p)
