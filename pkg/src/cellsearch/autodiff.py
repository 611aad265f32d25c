"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine records a tape of closures during the forward pass and walks it
backwards in a fixed topological order, so identical inputs always produce
bit-identical values and gradients.  It implements exactly the kernels the
skip-cell search and the toy segmentation backbone need: elementwise
arithmetic, stable softmaxes, reductions, 1x1 / dense / depthwise 2-D
convolutions, stride-1 pooling with same padding, and the stride-2 plumbing
for the encoder / decoder.  No GPU path, no general broadcasting beyond
scalars and trailing singleton axes.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tan",
    "clamp",
    "relu",
    "sum_all",
    "sum_over",
    "softmax1d",
    "softmax_channels",
    "log_softmax_channels",
    "index",
    "gather",
    "take_rows",
    "submatrix",
    "concat_channels",
    "channel_take",
    "channel_place",
    "conv1x1",
    "conv2d",
    "depthwise_conv2d",
    "maxpool3_same",
    "avgpool3_same",
    "maxpool2_down",
    "upsample2x",
    "sgd_step",
    "adam_step",
    "zero_grads",
]


class ShapeError(ValueError):
    """An op received tensors whose shapes it cannot use."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class Tensor:
    """Dense value carrier with an optional gradient of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple["Tensor", ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)  # owned copy, C order
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Trainable tensor; owns its storage plus lazily created Adam moments."""

    __slots__ = ("name", "adam_m", "adam_v", "adam_t")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.adam_m: np.ndarray | None = None
        self.adam_v: np.ndarray | None = None
        self.adam_t = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate grads of every parameter reachable from a scalar loss."""
    if loss.data.ndim != 0:
        raise ShapeError("backward", f"loss must be a scalar, got shape {loss.data.shape}")
    if not loss._parents:
        raise RuntimeError("backward called without a recorded forward graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data / b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = _coerce(a)

    def backward_fn(g):
        a.accumulate(-g)

    return _node(-a.data, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward_fn(g):
        a.accumulate(g * out_data)

    return _node(out_data, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward_fn(g):
        a.accumulate(g / a.data)

    return _node(out_data, (a,), backward_fn)


def tan(a: Tensor) -> Tensor:
    out_data = np.tan(a.data)

    def backward_fn(g):
        c = np.cos(a.data)
        a.accumulate(g / (c * c))

    return _node(out_data, (a,), backward_fn)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero outside the open interval."""
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def backward_fn(g):
        a.accumulate(g * mask)

    return _node(out_data, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward_fn(g):
        a.accumulate(g * mask)

    return _node(a.data * mask, (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions and softmaxes
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(np.sum(a.data))

    def backward_fn(g):
        a.accumulate(np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), backward_fn)


def sum_over(a: Tensor, axes: tuple[int, ...], keepdims: bool = False) -> Tensor:
    axes = tuple(axes)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate(np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), backward_fn)


def softmax1d(a: Tensor) -> Tensor:
    """Stable softmax of a 1-D vector (max subtraction)."""
    if a.data.ndim != 1:
        raise ShapeError("softmax1d", f"expected 1-D input, got shape {a.data.shape}")
    z = np.exp(a.data - a.data.max())
    s = z / z.sum()

    def backward_fn(g):
        a.accumulate(s * (g - np.dot(g, s)))

    return _node(s, (a,), backward_fn)


def softmax_channels(a: Tensor) -> Tensor:
    """Stable softmax along axis 1 of a rank-4 tensor."""
    if a.data.ndim != 4:
        raise ShapeError("softmax", f"expected rank-4 input, got shape {a.data.shape}")
    z = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    s = z / z.sum(axis=1, keepdims=True)

    def backward_fn(g):
        a.accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _node(s, (a,), backward_fn)


def log_softmax_channels(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError("log-softmax", f"expected rank-4 input, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lsm = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward_fn(g):
        a.accumulate(g - np.exp(lsm) * g.sum(axis=1, keepdims=True))

    return _node(lsm, (a,), backward_fn)


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def index(v: Tensor, i: int) -> Tensor:
    """Scalar entry of a 1-D tensor."""
    if v.data.ndim != 1:
        raise ShapeError("index", f"expected 1-D input, got shape {v.data.shape}")
    i = int(i)

    def backward_fn(g):
        full = np.zeros_like(v.data)
        full[i] = g
        v.accumulate(full)

    return _node(np.asarray(v.data[i]), (v,), backward_fn)


def gather(v: Tensor, flat_idx) -> Tensor:
    """1-D gather of entries by flat index from a tensor of any shape."""
    flat_idx = np.asarray(flat_idx, dtype=np.intp)
    out_data = v.data.ravel()[flat_idx]

    def backward_fn(g):
        full = np.zeros_like(v.data)
        np.add.at(full.ravel(), flat_idx, g)
        v.accumulate(full)

    return _node(out_data, (v,), backward_fn)


def take_rows(w: Tensor, rows) -> Tensor:
    """Select rows along axis 0 (unique indices)."""
    rows = np.asarray(rows, dtype=np.intp)
    out_data = w.data[rows]

    def backward_fn(g):
        full = np.zeros_like(w.data)
        full[rows] = g
        w.accumulate(full)

    return _node(out_data, (w,), backward_fn)


def submatrix(w: Tensor, rows, cols) -> Tensor:
    """Select a rows x cols block of a 2-D tensor (unique indices)."""
    if w.data.ndim != 2:
        raise ShapeError("submatrix", f"expected 2-D input, got shape {w.data.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    sel = np.ix_(rows, cols)
    out_data = w.data[sel]

    def backward_fn(g):
        full = np.zeros_like(w.data)
        full[sel] = g
        w.accumulate(full)

    return _node(out_data, (w,), backward_fn)


# ---------------------------------------------------------------------------
# channel plumbing (rank-4 activations, channels on axis 1)
# ---------------------------------------------------------------------------


def _require_rank4(op: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(op, f"expected rank-4 input (b, c, h, w), got shape {x.data.shape}")


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    for p in parts:
        _require_rank4("concat", p)
    base = parts[0].data.shape
    for p in parts[1:]:
        if p.data.shape[0] != base[0] or p.data.shape[2:] != base[2:]:
            raise ShapeError("concat", f"incompatible shapes {base} vs {p.data.shape}")
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[:, lo:hi])

    return _node(out_data, parts, backward_fn)


def channel_take(x: Tensor, idx) -> Tensor:
    """Select channels by (unique) index."""
    _require_rank4("channel-take", x)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = x.data[:, idx]

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[:, idx] = g
        x.accumulate(full)

    return _node(out_data, (x,), backward_fn)


def channel_place(y: Tensor, x: Tensor, idx) -> Tensor:
    """Write y into channels ``idx`` of a copy of x; other channels pass through bit-identically."""
    _require_rank4("channel-place", x)
    idx = np.asarray(idx, dtype=np.intp)
    if y.data.shape != (x.data.shape[0], len(idx)) + x.data.shape[2:]:
        raise ShapeError(
            "channel-place",
            f"processed block {y.data.shape} does not fit {len(idx)} channels of {x.data.shape}",
        )
    out_data = x.data.copy()
    out_data[:, idx] = y.data

    def backward_fn(g):
        if y.requires_grad:
            y.accumulate(g[:, idx])
        if x.requires_grad:
            gx = g.copy()
            gx[:, idx] = 0.0
            x.accumulate(gx)

    return _node(out_data, (y, x), backward_fn)


# ---------------------------------------------------------------------------
# convolutions (stride 1, same padding, odd kernels)
# ---------------------------------------------------------------------------


def _pad2d(xraw: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    """Spatially pad a rank-4 array (faster than np.pad for tiny arrays)."""
    if pad == 0:
        return xraw
    b, c, h, w = xraw.shape
    out = np.full((b, c, h + 2 * pad, w + 2 * pad), value) if value else np.zeros(
        (b, c, h + 2 * pad, w + 2 * pad)
    )
    out[:, :, pad : pad + h, pad : pad + w] = xraw
    return out


def _window_view_padded(xpad: np.ndarray, h: int, w: int, k: int = 3, dilation: int = 1) -> np.ndarray:
    """(b, c, h, w, k, k) strided view over an already padded array."""
    s = xpad.strides
    b, c = xpad.shape[:2]
    return np.lib.stride_tricks.as_strided(
        xpad,
        shape=(b, c, h, w, k, k),
        strides=(s[0], s[1], s[2], s[3], s[2] * dilation, s[3] * dilation),
    )


def _window_view(xraw: np.ndarray, k: int, dilation: int) -> np.ndarray:
    """(b, c, H, W, k, k) strided view of same-padded dilated k x k taps."""
    pad = ((k - 1) * dilation) // 2
    xpad = _pad2d(xraw, pad)
    span = (k - 1) * dilation + 1
    s = xpad.strides
    b, c, h, w = xraw.shape
    win = np.lib.stride_tricks.as_strided(
        xpad,
        shape=(b, c, h, w, k, k),
        strides=(s[0], s[1], s[2], s[3], s[2] * dilation, s[3] * dilation),
    )
    return win


def _cols_dense(xraw: np.ndarray, k: int, dilation: int) -> np.ndarray:
    """Contiguous (b*H*W, c*k*k) im2col (one copy, GEMM-ready)."""
    b, c, hh, ww = xraw.shape
    win = _window_view(xraw, k, dilation).transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(win).reshape(b * hh * ww, c * k * k)


def _cols_depthwise(xraw: np.ndarray, k: int, dilation: int) -> np.ndarray:
    """Contiguous (b, c, H*W, k*k) im2col (one copy)."""
    b, c, hh, ww = xraw.shape
    return np.ascontiguousarray(_window_view(xraw, k, dilation)).reshape(b, c, hh * ww, k * k)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise (dense 1x1) convolution; the one op allowed to change channel count."""
    _require_rank4("conv-1x1", x)
    if w.data.ndim != 2:
        raise ShapeError("conv-1x1", f"weight must be 2-D (out, in), got shape {w.data.shape}")
    if w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(
            "conv-1x1", f"weight expects {w.data.shape[1]} input channels, tensor has {x.data.shape[1]}"
        )
    bn, ci, hh, ww = x.data.shape
    co = w.data.shape[0]
    xr = x.data.reshape(bn, ci, hh * ww)
    out_data = np.matmul(w.data, xr).reshape(bn, co, hh, ww)
    parents = [x, w]
    if b is not None:
        if b.data.shape != (co,):
            raise ShapeError("conv-1x1", f"bias shape {b.data.shape} != ({co},)")
        out_data = out_data + b.data[None, :, None, None]
        parents.append(b)

    def backward_fn(g):
        gr = g.reshape(bn, co, hh * ww)
        if x.requires_grad:
            x.accumulate(np.matmul(w.data.T, gr).reshape(bn, ci, hh, ww))
        if w.requires_grad:
            w.accumulate(np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0))
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    return _node(out_data, parents, backward_fn)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Dense k x k convolution, stride 1, zero same-padding."""
    _require_rank4("conv2d", x)
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3] or w.data.shape[2] % 2 == 0:
        raise ShapeError("conv2d", f"weight must be (out, in, k, k) with odd k, got {w.data.shape}")
    if w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(
            "conv2d", f"weight expects {w.data.shape[1]} input channels, tensor has {x.data.shape[1]}"
        )
    co, ci, k, _ = w.data.shape
    bn, _, hh, ww = x.data.shape
    cols = _cols_dense(x.data, k, dilation)
    wmat = w.data.reshape(co, ci * k * k)
    out_data = (cols @ wmat.T).reshape(bn, hh, ww, co).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        if b.data.shape != (co,):
            raise ShapeError("conv2d", f"bias shape {b.data.shape} != ({co},)")
        out_data = out_data + b.data[None, :, None, None]
        parents.append(b)

    def backward_fn(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bn * hh * ww, co)
        if w.requires_grad:
            w.accumulate((gmat.T @ cols).reshape(co, ci, k, k))
        if x.requires_grad:
            # gradient w.r.t. x is correlation of g with the flipped kernel
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gcols = _cols_dense(np.ascontiguousarray(g), k, dilation)
            gx = gcols @ np.ascontiguousarray(wflip).reshape(ci, co * k * k).T
            x.accumulate(gx.reshape(bn, hh, ww, ci).transpose(0, 3, 1, 2))
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    return _node(out_data, parents, backward_fn)


def depthwise_conv2d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Per-channel k x k convolution, stride 1, zero same-padding; weight (c, k, k)."""
    _require_rank4("depthwise-conv", x)
    if w.data.ndim != 3 or w.data.shape[1] != w.data.shape[2] or w.data.shape[1] % 2 == 0:
        raise ShapeError("depthwise-conv", f"weight must be (c, k, k) with odd k, got {w.data.shape}")
    if w.data.shape[0] != x.data.shape[1]:
        raise ShapeError(
            "depthwise-conv",
            f"weight expects {w.data.shape[0]} channels, tensor has {x.data.shape[1]}",
        )
    c, k, _ = w.data.shape
    bn, _, hh, ww = x.data.shape
    cols = _cols_depthwise(x.data, k, dilation)  # (b, c, H*W, k*k)
    wr = w.data.reshape(c, k * k, 1)
    out_data = np.matmul(cols, wr).reshape(bn, c, hh, ww)

    def backward_fn(g):
        gr = np.ascontiguousarray(g).reshape(bn, c, hh * ww)
        if w.requires_grad:
            w.accumulate(np.matmul(gr[:, :, None, :], cols).sum(axis=0).reshape(c, k, k))
        if x.requires_grad:
            wflip = np.ascontiguousarray(w.data[:, ::-1, ::-1]).reshape(c, k * k, 1)
            gcols = _cols_depthwise(gr.reshape(bn, c, hh, ww), k, dilation)
            x.accumulate(np.matmul(gcols, wflip).reshape(bn, c, hh, ww))

    return _node(out_data, (x, w), backward_fn)


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

_COUNT_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _inbounds_counts(h: int, w: int) -> np.ndarray:
    """Number of in-bounds cells of each 3x3 same-padded window."""
    key = (h, w)
    if key not in _COUNT_CACHE:
        ones = np.pad(np.ones((h, w)), 1)
        win = np.lib.stride_tricks.sliding_window_view(ones, (3, 3))
        _COUNT_CACHE[key] = win.sum(axis=(2, 3))
    return _COUNT_CACHE[key]


def maxpool3_same(x: Tensor) -> Tensor:
    """3x3 max pooling, stride 1; -inf padding so border cells never win.

    Gradient ties break toward the lowest flattened window index.
    """
    _require_rank4("max-pool-3", x)
    b, c, h, w = x.data.shape
    flat = np.ascontiguousarray(_window_view_padded(_pad2d(x.data, 1, value=-np.inf), h, w)).reshape(
        b, c, h, w, 9
    )
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gpad = np.zeros((b, c, h + 2, w + 2))
        for t in range(9):
            u, v = divmod(t, 3)
            gpad[:, :, u : u + h, v : v + w] += g * (idx == t)
        x.accumulate(gpad[:, :, 1 : 1 + h, 1 : 1 + w])

    return _node(out_data, (x,), backward_fn)


def avgpool3_same(x: Tensor) -> Tensor:
    """3x3 average pooling, stride 1; windows renormalized by in-bounds count."""
    _require_rank4("avg-pool-3", x)
    b, c, h, w = x.data.shape
    counts = _inbounds_counts(h, w)
    win = _window_view_padded(_pad2d(x.data, 1), h, w)
    out_data = win.sum(axis=(4, 5)) / counts

    def backward_fn(g):
        gn = g / counts
        gpad = np.zeros((b, c, h + 2, w + 2))
        for t in range(9):
            u, v = divmod(t, 3)
            gpad[:, :, u : u + h, v : v + w] += gn
        x.accumulate(gpad[:, :, 1 : 1 + h, 1 : 1 + w])

    return _node(out_data, (x,), backward_fn)


def maxpool2_down(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (backbone downsampling)."""
    _require_rank4("max-pool-2-down", x)
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError("max-pool-2-down", f"spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4
    )
    idx = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        x.accumulate(gx)

    return _node(out_data, (x,), backward_fn)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling (backbone decoder plumbing)."""
    _require_rank4("upsample-2x", x)
    b, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        x.accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _node(out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """Plain SGD (no momentum, no decay); parameters without grads are skipped.

    Grads are zeroed after the update.
    """
    for p in params:
        if p.grad is None:
            continue
        p.data -= lr * p.grad
        p.zero_grad()


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Textbook Adam with bias correction; parameters without grads are skipped.

    Grads are zeroed after the update.
    """
    for p in params:
        if p.grad is None:
            continue
        if p.adam_m is None:
            p.adam_m = np.zeros_like(p.data)
            p.adam_v = np.zeros_like(p.data)
        p.adam_t += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * p.grad
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (p.grad * p.grad)
        m_hat = p.adam_m / (1.0 - beta1 ** p.adam_t)
        v_hat = p.adam_v / (1.0 - beta2 ** p.adam_t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
