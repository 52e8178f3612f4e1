"""Pure numpy implementations of the hot loops.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and the same results (bit-identical for the gather/scatter kernels,
within float rounding for the reductions).
"""

import numpy as np


def im2col(xp, kh, kw, stride, rate, out_h, out_w):
    """Gather dilated/strided patches of a padded NCHW array.

    Returns an ``(N, out_h*out_w, kh*kw*C)`` array: one row per output pixel,
    columns ordered by kernel row, then kernel column, then channel.
    """
    n, c = xp.shape[:2]
    xh = xp.transpose(0, 2, 3, 1)
    cols = np.empty((n, out_h, out_w, kh, kw, c), dtype=xp.dtype)
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(kh):
        r0 = i * rate
        for j in range(kw):
            c0 = j * rate
            cols[:, :, :, i, j] = xh[:, r0:r0 + row_span:stride, c0:c0 + col_span:stride]
    return cols.reshape(n, out_h * out_w, kh * kw * c)


def col2im(cols, channels, hp, wp, kh, kw, stride, rate, out_h, out_w):
    """Scatter-add the adjoint of :func:`im2col` back into a padded NCHW array."""
    n = cols.shape[0]
    cols = cols.reshape(n, out_h, out_w, kh, kw, channels)
    xh = np.zeros((n, hp, wp, channels), dtype=cols.dtype)
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(kh):
        r0 = i * rate
        for j in range(kw):
            c0 = j * rate
            xh[:, r0:r0 + row_span:stride, c0:c0 + col_span:stride] += cols[:, :, :, i, j]
    return np.ascontiguousarray(xh.transpose(0, 3, 1, 2))


def maxpool_forward(xp, kh, kw, stride, out_h, out_w):
    """Max over windows of a padded array (pad cells must hold -inf).

    Returns the pooled values and, per output cell, the flat index into the
    padded plane of the winning input (first maximum in row-major tap order).
    """
    n, c, hp, wp = xp.shape
    out = np.full((n, c, out_h, out_w), -np.inf, dtype=xp.dtype)
    arg = np.zeros((n, c, out_h, out_w), dtype=np.int64)
    rows = np.arange(out_h)[:, None] * stride
    cols = np.arange(out_w)[None, :] * stride
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            v = xp[:, :, i:i + row_span:stride, j:j + col_span:stride]
            better = v > out
            out = np.where(better, v, out)
            arg = np.where(better, (rows + i) * wp + (cols + j), arg)
    return out, arg


def maxpool_backward(grad, arg, hp, wp):
    n, c = grad.shape[:2]
    gx = np.zeros((n * c, hp * wp), dtype=grad.dtype)
    flat_arg = arg.reshape(n * c, -1)
    flat_grad = grad.reshape(n * c, -1)
    for k in range(n * c):
        np.add.at(gx[k], flat_arg[k], flat_grad[k])
    return gx.reshape(n, c, hp, wp)


def avgpool_forward(xp, valid, kh, kw, stride, out_h, out_w):
    """Mean over windows counting only cells where ``valid`` is 1.

    ``xp`` is zero-padded; ``valid`` is the (hp, wp) indicator of real cells.
    Returns the pooled values and the per-cell divisor.
    """
    n, c = xp.shape[:2]
    acc = np.zeros((n, c, out_h, out_w), dtype=xp.dtype)
    count = np.zeros((out_h, out_w), dtype=xp.dtype)
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            acc += xp[:, :, i:i + row_span:stride, j:j + col_span:stride]
            count += valid[i:i + row_span:stride, j:j + col_span:stride]
    return acc / count, count


def avgpool_backward(grad, count, hp, wp, kh, kw, stride):
    n, c, out_h, out_w = grad.shape
    share = grad / count
    gx = np.zeros((n, c, hp, wp), dtype=grad.dtype)
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + row_span:stride, j:j + col_span:stride] += share
    return gx


def ace_pairwise(channel, alpha):
    """Brute-force sum of clipped differences over inverse Euclidean distance."""
    h, w = channel.shape
    vals = channel.reshape(-1).astype(np.float64)
    yy, xx = np.divmod(np.arange(h * w), w)
    out = np.empty(h * w, dtype=np.float64)
    block = max(1, 2_000_000 // max(1, h * w))
    for start in range(0, h * w, block):
        stop = min(h * w, start + block)
        dy = yy[start:stop, None] - yy[None, :]
        dx = xx[start:stop, None] - xx[None, :]
        dist = np.sqrt((dy * dy + dx * dx).astype(np.float64))
        diff = np.clip(alpha * (vals[start:stop, None] - vals[None, :]), -1.0, 1.0)
        idx = np.arange(stop - start)
        dist[idx, start + idx] = np.inf
        out[start:stop] = (diff / dist).sum(axis=1)
    return out.reshape(h, w)
