"""Small reverse-mode autodiff over float64 numpy arrays.

Every tensor produced by an op that touches a ``requires_grad`` input records
its parents and a backward closure.  Node ids grow monotonically, so sorting
the reachable nodes by id gives a topological order; :func:`backward` walks it
in reverse, visiting each node once.

The op set is closed on purpose: only what the patch pipeline, the losses and
the toy detector need is implemented, and each op carries its own gradient
rule.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

SQRT_EPS = 1e-8
LEAKY_SLOPE = 0.1

_ids = itertools.count()


class TensorError(ValueError):
    """Raised for invalid tensor operations (shape, domain, graph misuse)."""


class ShapeError(TensorError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise TensorError("division by zero")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), backward, "div")


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    return _node(a.data * k, (a,), lambda g: (g * k,), "scale")


def sqrt(a, eps: float = SQRT_EPS) -> Tensor:
    """Square root with the guarded derivative 1 / (2 sqrt(x + eps)).

    Callers whose argument is already bounded away from zero may pass
    ``eps=0`` for the exact derivative.
    """
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise TensorError(f"sqrt of negative value (min {a.data.min():.3g})")
    out = np.sqrt(a.data)
    denom = 2.0 * np.sqrt(a.data + eps)
    return _node(out, (a,), lambda g: (g / denom,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def signed_square(a) -> Tensor:
    """sign(x) * x**2; derivative 2|x|."""
    a = as_tensor(a)
    ax = np.abs(a.data)
    return _node(a.data * ax, (a,), lambda g: (2.0 * ax * g,), "signed_square")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    d = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * d, (a,), lambda g: (g * d,), "leaky_relu")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; subgradient 1 on the closed interval, 0 outside."""
    a = as_tensor(a)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise TensorError("log of non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return _node(out, (a,), lambda g: (g * s,), "softplus")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise TensorError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _check_nonempty(a: Tensor, axes: tuple[int, ...]) -> int:
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if a.size == 0 or count == 0:
        raise TensorError(f"empty reduction over axes {axes} of shape {a.shape}")
    return count


def _expand(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    _check_nonempty(a, axes)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _node(out, (a,), lambda g: (_expand(g, a.shape, axes, keepdims),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = _check_nonempty(a, axes)
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _node(out, (a,), lambda g: (_expand(g, a.shape, axes, keepdims) / count,), "mean")


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first (lowest flat index) maximum only."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    _check_nonempty(a, axes)
    kept = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a.data, kept + list(axes))
    lead = moved.shape[: len(kept)]
    flat = moved.reshape(lead + (-1,))
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if keepdims:
        out = out.reshape([1 if ax in axes else n for ax, n in enumerate(a.shape)])

    def backward(g):
        g = np.asarray(g).reshape(lead)
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(kept + list(axes))),)

    out_t = _node(out, (a,), backward, "max")
    return out_t


def argmax_mask(a: Tensor, axis=None) -> np.ndarray:
    """0/1 mask of where :func:`tmax` routes its gradient (for inspection/tests)."""
    probe = Tensor(a.data, requires_grad=True)
    backward(tsum(tmax(probe, axis)))
    return probe.grad


# ---------------------------------------------------------------------------
# structural ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), backward, "getitem")


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` follows ``np.pad``'s per-axis (before, after)."""
    a = as_tensor(a)
    widths = tuple(tuple(int(v) for v in w) for w in widths)
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
    return _node(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise TensorError("stack of an empty sequence")
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs identical shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(out, ts, backward, "stack")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise TensorError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]}: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _node(out, ts, backward, "concat")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with (out, in, kh, kw) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernels, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernels {w.shape}")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernels {w.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # one (K, ho*wo) column block per image: identical images take identical
    # BLAS paths, so batch position never changes the result bits
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    k = c * kh * kw
    cols3 = cols.reshape(n, k, ho * wo)
    w2 = w.data.reshape(o, k)
    out = np.matmul(w2, cols3).reshape(n, o, ho, wo)

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        gw = np.matmul(g3, cols3.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
            gx = dxp[:, :, p : p + h, p : p + wd]
        return gx, gw

    return _node(np.ascontiguousarray(out), (x, w), backward, "conv2d")


# ---------------------------------------------------------------------------
# bilinear warp


def _warp_taps(in_hw, out_hw, affine):
    """Flat source indices, destination indices and bilinear weights of in-bounds taps."""
    a = np.asarray(affine, dtype=np.float64)
    if a.shape != (2, 3):
        raise ShapeError(f"affine must be 2x3, got {a.shape}")
    lin = a[:, :2]
    det = np.linalg.det(lin)
    if abs(det) < 1e-12:
        raise TensorError(f"singular affine (det={det:.3g})")
    inv = np.linalg.inv(lin)
    h, w = in_hw
    ho, wo = out_hw
    vv, uu = np.mgrid[0:ho, 0:wo]
    du = uu.ravel() - a[0, 2]
    dv = vv.ravel() - a[1, 2]
    xs = inv[0, 0] * du + inv[0, 1] * dv
    ys = inv[1, 0] * du + inv[1, 1] * dv
    near = (xs > -1) & (xs < w) & (ys > -1) & (ys < h)
    dst = np.flatnonzero(near)
    xs, ys = xs[near], ys[near]
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    srcs, dsts, wts = [], [], []
    for dy, dx, wt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wt > 0)
        srcs.append(yy[ok] * w + xx[ok])
        dsts.append(dst[ok])
        wts.append(wt[ok])
    return np.concatenate(srcs), np.concatenate(dsts), np.concatenate(wts)


def bilinear_warp(image, affine, out_shape: tuple[int, int] | None = None) -> Tensor:
    """Resample an (H, W) or (H, W, C) image through a 2x3 affine map.

    ``affine`` maps input pixel coordinates (x=column, y=row, pixel centres at
    integers) to output coordinates; each output pixel is sampled at the
    inverse-mapped location.  Samples outside the input read as zero.
    Differentiable with respect to the image only.
    """
    image = as_tensor(image)
    if image.ndim not in (2, 3):
        raise ShapeError(f"bilinear_warp expects (H, W) or (H, W, C), got {image.shape}")
    h, w = image.shape[:2]
    ho, wo = out_shape if out_shape is not None else (h, w)
    chans = image.shape[2:]
    c = int(np.prod(chans)) if chans else 1
    src, dst, wt = _warp_taps((h, w), (ho, wo), affine)
    flat = image.data.reshape(h * w, c)
    out = np.empty((ho * wo, c))
    for k in range(c):
        out[:, k] = np.bincount(dst, weights=wt * flat[src, k], minlength=ho * wo)

    def backward(g):
        g2 = g.reshape(ho * wo, c)
        gi = np.empty((h * w, c))
        for k in range(c):
            gi[:, k] = np.bincount(src, weights=wt * g2[dst, k], minlength=h * w)
        return (gi.reshape(image.shape),)

    return _node(out.reshape((ho, wo) + chans), (image,), backward, "bilinear_warp")


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from a scalar root."""
    if root.size != 1:
        raise TensorError(f"backward needs a scalar output, got shape {root.shape}")
    if not root.requires_grad:
        raise TensorError("backward on a tensor that does not require grad")

    nodes: dict[int, Tensor] = {}
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack_.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {root._id: np.ones(root.shape)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            g = np.zeros(t.shape)
        if t._backward is None:
            t.grad = np.array(g, dtype=np.float64)
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = np.array(pg, dtype=np.float64)
