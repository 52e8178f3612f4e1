"""Slow reference implementations used to cross-check the fast paths.

Nothing here shares code with the production kernels: loops are written out
directly so a bug in one route cannot hide in the other.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def naive_conv2d(x, w, bias=None, stride=1, rate=1, padding=(0, 0, 0, 0)):
    """Nested-loop atrous convolution in the dtype of ``x``."""
    x = np.asarray(x)
    w = np.asarray(w, dtype=x.dtype)
    top, bottom, left, right = padding
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + top + bottom, wd + left + right), dtype=x.dtype)
    xp[:, :, top:top + h, left:left + wd] = x
    out_h = (xp.shape[2] - ((kh - 1) * rate + 1)) // stride + 1
    out_w = (xp.shape[3] - ((kw - 1) * rate + 1)) // stride + 1
    y = np.zeros((n, oc, out_h, out_w), dtype=x.dtype)
    for b in range(n):
        for o in range(oc):
            for i in range(out_h):
                for j in range(out_w):
                    acc = x.dtype.type(0)
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ch, i * stride + u * rate, j * stride + v * rate] * w[o, ch, u, v]
                    if bias is not None:
                        acc += bias[o]
                    y[b, o, i, j] = acc
    return y


def zero_inflate(w, rate):
    """Spread kernel taps apart with ``rate - 1`` zeros between neighbours."""
    w = np.asarray(w)
    oc, ic, kh, kw = w.shape
    out = np.zeros((oc, ic, (kh - 1) * rate + 1, (kw - 1) * rate + 1), dtype=w.dtype)
    out[:, :, ::rate, ::rate] = w
    return out


def naive_pool(x, kind, window, stride=1, padding=(0, 0, 0, 0)):
    x = np.asarray(x)
    top, bottom, left, right = padding
    n, c, h, w = x.shape
    kh, kw = window
    out_h = (h + top + bottom - kh) // stride + 1
    out_w = (w + left + right - kw) // stride + 1
    y = np.zeros((n, c, out_h, out_w), dtype=x.dtype)
    for b, ch, i, j in itertools.product(range(n), range(c), range(out_h), range(out_w)):
        vals = []
        for u in range(kh):
            for v in range(kw):
                r = i * stride + u - top
                q = j * stride + v - left
                if 0 <= r < h and 0 <= q < w:
                    vals.append(x[b, ch, r, q])
        y[b, ch, i, j] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return y


def bilinear_sample(row, factor, k):
    """Half-pixel-center linear interpolation of output index ``k`` of a 1-D row."""
    n = len(row)
    src = (k + 0.5) / factor - 0.5
    src = min(max(src, 0.0), n - 1.0)
    lo = int(math.floor(src))
    hi = min(lo + 1, n - 1)
    t = src - lo
    return (1.0 - t) * row[lo] + t * row[hi]


def finite_difference(fn, arr, eps=1e-3, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``arr`` (mutated in place, restored)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size, dtype=np.float64)
    for k in idx:
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(fn())
        flat[k] = orig - eps
        fm = float(fn())
        flat[k] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out.reshape(arr.shape)


def relative_error(analytic, numeric):
    """Max absolute discrepancy scaled by the largest numeric magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def pairwise_auc(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for chunk in np.array_split(pos, max(1, pos.size // 512)):
        diff = chunk[:, None] - neg[None, :]
        wins += (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return wins / (pos.size * neg.size)


def ace_loops(channel, alpha):
    """Direct double sum over pixel pairs, pure Python, for tiny images."""
    h, w = channel.shape
    out = np.zeros((h, w))
    for y0, x0 in itertools.product(range(h), range(w)):
        acc = 0.0
        for y1, x1 in itertools.product(range(h), range(w)):
            if (y0, x0) == (y1, x1):
                continue
            t = alpha * (channel[y0, x0] - channel[y1, x1])
            acc += min(max(t, -1.0), 1.0) / math.hypot(y0 - y1, x0 - x1)
        out[y0, x0] = acc
    return out


def window_average_loop(window_fn, image, window, stride):
    """Average of ``window_fn`` over every window position, one window at a time.

    Positions step by ``stride`` from 0; if the last step leaves a strip at the
    far border, one more window flush with that border is added.
    """
    h, w = image.shape[:2]

    def starts(length):
        out, pos = [], 0
        while pos + window <= length:
            out.append(pos)
            pos += stride
        if out[-1] + window < length:
            out.append(length - window)
        return out

    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for top in starts(h):
        for left in starts(w):
            prob = window_fn(image[top:top + window, left:left + window])
            for i in range(window):
                for j in range(window):
                    total[top + i, left + j] += prob[i, j]
                    count[top + i, left + j] += 1
    return total / count, count
