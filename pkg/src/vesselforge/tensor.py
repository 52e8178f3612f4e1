"""Dense NCHW tensors with reverse-mode differentiation.

Only the operations needed by the segmentation network and its loss are
provided. Forward results are immutable; ``backward`` fills ``.grad`` on every
leaf that requires a gradient, summing contributions from every path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateShapeError(ShapeError):
    """An operation would produce an empty output."""


class GraphError(RuntimeError):
    """The computation graph cannot be differentiated."""


class Tensor:
    """N-dimensional float array with optional gradient and lineage.

    ``node`` is ``None`` for leaves, otherwise ``(op_name, parents)``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node(self):
        if self.op is None:
            return None
        return self.op, self.parents

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        kind = self.op or "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={kind})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _common_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Kernel geometry: ``padding`` is ``(top, bottom, left, right)``."""

    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    rate: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self):
        if len(self.kernel) != 2 or min(self.kernel) < 1:
            raise ValueError(f"kernel must be two positive ints, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.rate < 1:
            raise ValueError(f"rate must be >= 1, got {self.rate}")
        if len(self.padding) != 4 or min(self.padding) < 0:
            raise ValueError(f"padding must be four non-negative ints, got {self.padding}")

    @property
    def extent(self) -> tuple[int, int]:
        kh, kw = self.kernel
        return (kh - 1) * self.rate + 1, (kw - 1) * self.rate + 1

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        top, bottom, left, right = self.padding
        eh, ew = self.extent
        return (h + top + bottom - eh) // self.stride + 1, (w + left + right - ew) // self.stride + 1


def same_padding(kernel: tuple[int, int], rate: int = 1) -> tuple[int, int, int, int]:
    """Per-side padding that keeps the spatial size at stride 1."""
    th = (kernel[0] - 1) * rate
    tw = (kernel[1] - 1) * rate
    return th // 2, th - th // 2, tw // 2, tw - tw // 2


def _check_window(h, w, spec_extent, padding, what):
    top, bottom, left, right = padding
    eh, ew = spec_extent
    if h + top + bottom < eh or w + left + right < ew:
        raise DegenerateShapeError(
            f"{what}: window extent {eh}x{ew} exceeds padded input "
            f"{h + top + bottom}x{w + left + right} (axes 2,3)"
        )


def _pad(x, padding, value=0.0):
    top, bottom, left, right = padding
    if not any(padding):
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)), constant_values=value)


def _unpad(xp, padding):
    top, bottom, left, right = padding
    h, w = xp.shape[2], xp.shape[3]
    return xp[:, :, top:h - bottom, left:w - right]


def conv2d(x, w, bias=None, spec: ConvSpec = ConvSpec()) -> Tensor:
    """Atrous 2-D convolution (cross-correlation) of an NCHW batch.

    ``y[n, o, i, j] = sum_{c,u,v} xpad[n, c, i*s + u*r, j*s + v*r] * w[o, c, u, v] + b[o]``
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be OC x IC x kH x kW, got shape {w.shape}")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if c != ic:
        raise ShapeError(f"conv2d channel mismatch: input axis 1 has {c}, weight axis 1 has {ic}")
    if (kh, kw) != tuple(spec.kernel):
        raise ShapeError(f"conv2d weight kernel {(kh, kw)} disagrees with spec {spec.kernel}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (oc,):
            raise ShapeError(f"conv2d bias must have shape ({oc},), got {bias.shape}")
    _check_window(h, wd, spec.extent, spec.padding, "conv2d")
    out_h, out_w = spec.output_size(h, wd)
    if out_h <= 0 or out_w <= 0:
        raise DegenerateShapeError(f"conv2d output would be {out_h}x{out_w}")

    dtype = _common_dtype(x.data, w.data)
    xp = _pad(x.data.astype(dtype, copy=False), spec.padding)
    hp, wp = xp.shape[2], xp.shape[3]
    s, r = spec.stride, spec.rate
    cols = kernels.im2col(xp, kh, kw, s, r, out_h, out_w).reshape(n * out_h * out_w, kh * kw * ic)
    # columns run over (kernel row, kernel col, channel)
    w2 = np.ascontiguousarray(w.data.astype(dtype, copy=False).transpose(0, 2, 3, 1)).reshape(oc, kh * kw * ic)
    y = cols @ w2.T
    if bias is not None:
        y += bias.data.astype(dtype, copy=False)
    y = np.ascontiguousarray(y.reshape(n, out_h, out_w, oc).transpose(0, 3, 1, 2))

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * out_h * out_w, oc)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, out_h * out_w, kh * kw * ic)
            gx = _unpad(kernels.col2im(dcols, c, hp, wp, kh, kw, s, r, out_h, out_w), spec.padding)
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, ic, oc).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(y, "conv2d", parents, backward)


# ---------------------------------------------------------------------------
# pooling and resampling


def pool2d(x, kind: str, window=(3, 3), stride: int = 1, padding=(0, 0, 0, 0)) -> Tensor:
    """Max or average pooling; averages count only real (unpadded) cells."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"pool2d input must be NCHW, got shape {x.shape}")
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    kh, kw = window
    spec = ConvSpec(kernel=(kh, kw), stride=stride, padding=tuple(padding))
    n, c, h, w = x.shape
    _check_window(h, w, spec.extent, spec.padding, "pool2d")
    out_h, out_w = spec.output_size(h, w)
    top, bottom, left, right = spec.padding

    if kind == "max":
        xp = _pad(x.data, spec.padding, value=-np.inf)
        hp, wp = xp.shape[2], xp.shape[3]
        y, arg = kernels.maxpool_forward(xp, kh, kw, stride, out_h, out_w)

        def backward(g):
            return (_unpad(kernels.maxpool_backward(g, arg, hp, wp), spec.padding),)
    else:
        xp = _pad(x.data, spec.padding)
        hp, wp = xp.shape[2], xp.shape[3]
        valid = np.zeros((hp, wp), dtype=x.dtype)
        valid[top:hp - bottom, left:wp - right] = 1
        y, count = kernels.avgpool_forward(xp, valid, kh, kw, stride, out_h, out_w)
        if np.any(count == 0):
            raise DegenerateShapeError("pool2d: a window covers only padding")

        def backward(g):
            return (_unpad(kernels.avgpool_backward(g, count, hp, wp, kh, kw, stride), spec.padding),)

    return _result(y, f"{kind}pool2d", (x,), backward)


def bilinear_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``(n_in*factor, n_in)`` half-pixel-center interpolation matrix."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def _separable(a, rows, cols):
    # rows @ a[n, c] @ cols.T as two large GEMMs instead of many small ones
    t = np.tensordot(a, cols, axes=([3], [1]))  # n, c, h, W
    t = np.tensordot(t, rows, axes=([2], [1]))  # n, c, W, H
    return np.ascontiguousarray(t.transpose(0, 1, 3, 2))


def upsample_bilinear(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise ShapeError(f"upsample input must be NCHW, got shape {x.shape}")
    if factor == 1:
        return _result(x.data.copy(), "upsample", (x,), lambda g: (g,))
    _, _, h, w = x.shape
    ah = bilinear_matrix(h, factor, x.dtype)
    aw = bilinear_matrix(w, factor, x.dtype)
    y = _separable(x.data, ah, aw)

    def backward(g):
        return (_separable(g, ah.T, aw.T),)

    return _result(y, "upsample", (x,), backward)


# ---------------------------------------------------------------------------
# structural and elementwise ops


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat needs at least one input")
    ref = xs[0].shape
    for k, t in enumerate(xs[1:], start=1):
        if len(t.shape) != len(ref) or any(
            a != b for ax, (a, b) in enumerate(zip(t.shape, ref)) if ax != axis
        ):
            bad = [ax for ax, (a, b) in enumerate(zip(t.shape, ref)) if ax != axis and a != b]
            raise ShapeError(f"concat input {k} shape {t.shape} differs from {ref} on axes {bad}")
    y = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(y, "concat", xs, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _result(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def softmax_channel(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim < 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_channel needs a channel axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, "softmax", (x,), backward)


def softmax_nll(logits, target, weights, floor: float) -> Tensor:
    """``sum(weights * -log p[target])`` with p = channel softmax of ``logits``, clamped to [floor, 1 - floor].

    Computed from the logits in float64 so saturated pixels neither round to
    log(0) nor lose their gradient: the clamp bounds the value, while the
    gradient is the unclamped ``softmax - onehot``. A confidently wrong
    pixel therefore keeps pulling towards its label.
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.data.ndim < 2 or target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"target {target.shape} does not match logits {logits.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    idx = np.expand_dims(target.astype(np.intp), 1)
    nll = lse - np.take_along_axis(z, idx, axis=1)[:, 0]
    nll = np.clip(nll, -np.log1p(-floor), -np.log(floor))
    value = np.asarray((weights * nll).sum(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        np.put_along_axis(p, idx, np.take_along_axis(p, idx, axis=1) - 1.0, axis=1)
        return ((float(g) * weights[:, None] * p).astype(logits.dtype),)

    return _result(value, "softmax_nll", (logits,), backward)


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_channel":
        return softmax_channel(x)
    raise ValueError(f"unknown activation {kind!r}")


def take(x, index: int, axis: int = 1) -> Tensor:
    """Select one slice along ``axis`` (dropping the axis)."""
    x = as_tensor(x)
    y = np.take(x.data, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _result(y, "take", (x,), backward)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        return _result(a.data + np.asarray(b, dtype=a.dtype), "add", (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    """Product with a tensor, an array constant of equal shape, or a scalar."""
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul operands differ in shape: {a.shape} vs {b.shape}")
        return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))
    const = np.asarray(b, dtype=a.dtype)
    if const.ndim and const.shape != a.shape:
        raise ShapeError(f"mul operands differ in shape: {a.shape} vs {const.shape}")
    return _result(a.data * const, "mul", (a,), lambda g: (g * const,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _result(np.clip(x.data, lo, hi), "clip", (x,), lambda g: (g * inside,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _result(
        np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,),
        lambda g: (np.full_like(x.data, g),),
    )


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _result(
        np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,),
        lambda g: (np.full_like(x.data, g / n),),
    )


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError(f"cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            pm = state.get(id(p))
            if pm == 1:
                raise GraphError(f"cycle detected at {p!r}")
            if pm is None and p.requires_grad:
                stack.append((p, False))
    return order


def _flush_subnormals(a: np.ndarray) -> np.ndarray:
    # float32 subnormals slow BLAS by two orders of magnitude; they arise once the loss saturates
    if a.dtype != np.float32:
        return a
    tiny = np.abs(a) < np.finfo(np.float32).tiny
    return np.where(tiny, np.float32(0), a) if tiny.any() else a


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` (summing into any existing value) on reachable leaves."""
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss has no lineage to any leaf requiring a gradient")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            raise GraphError(f"missing lineage for {node!r}")
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _flush_subnormals(np.asarray(pg, dtype=parent.dtype).reshape(parent.shape))
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
