# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot loops in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] xh, real[:, :, ::1] cols,
            int kh, int kw, int stride, int rate, int out_h, int out_w):
    cdef Py_ssize_t n, c, i, j, oy, ox, k, iy, ix
    cdef Py_ssize_t nb = xh.shape[0], nc = xh.shape[3]
    with nogil:
        for n in range(nb):
            for oy in range(out_h):
                for ox in range(out_w):
                    k = 0
                    for i in range(kh):
                        iy = oy * stride + i * rate
                        for j in range(kw):
                            ix = ox * stride + j * rate
                            for c in range(nc):
                                cols[n, oy * out_w + ox, k + c] = xh[n, iy, ix, c]
                            k = k + nc


def im2col(xp, int kh, int kw, int stride, int rate, int out_h, int out_w):
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, out_h * out_w, kh * kw * c), dtype=xp.dtype)
    _im2col(xh, cols, kh, kw, stride, rate, out_h, out_w)
    return cols


def _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] xh,
            int kh, int kw, int stride, int rate, int out_h, int out_w):
    cdef Py_ssize_t n, c, i, j, oy, ox, k, iy, ix
    cdef Py_ssize_t nb = xh.shape[0], nc = xh.shape[3]
    with nogil:
        for n in range(nb):
            for oy in range(out_h):
                for ox in range(out_w):
                    k = 0
                    for i in range(kh):
                        iy = oy * stride + i * rate
                        for j in range(kw):
                            ix = ox * stride + j * rate
                            for c in range(nc):
                                xh[n, iy, ix, c] += cols[n, oy * out_w + ox, k + c]
                            k = k + nc


def col2im(cols, int channels, int hp, int wp, int kh, int kw, int stride,
           int rate, int out_h, int out_w):
    cols = np.ascontiguousarray(cols)
    xh = np.zeros((cols.shape[0], hp, wp, channels), dtype=cols.dtype)
    _col2im(cols, xh, kh, kw, stride, rate, out_h, out_w)
    return np.ascontiguousarray(xh.transpose(0, 3, 1, 2))


def _maxpool_forward(const real[:, :, :, ::1] xp, real[:, :, :, ::1] out,
                     cnp.int64_t[:, :, :, ::1] arg, int kh, int kw, int stride):
    cdef Py_ssize_t n, c, oy, ox, i, j, y, x
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1], wp = xp.shape[3]
    cdef Py_ssize_t out_h = out.shape[2], out_w = out.shape[3]
    cdef real best, v
    cdef cnp.int64_t best_at
    with nogil:
        for n in range(nb):
            for c in range(nc):
                for oy in range(out_h):
                    for ox in range(out_w):
                        best = xp[n, c, oy * stride, ox * stride]
                        best_at = oy * stride * wp + ox * stride
                        for i in range(kh):
                            y = oy * stride + i
                            for j in range(kw):
                                x = ox * stride + j
                                v = xp[n, c, y, x]
                                if v > best:
                                    best = v
                                    best_at = y * wp + x
                        out[n, c, oy, ox] = best
                        arg[n, c, oy, ox] = best_at


def maxpool_forward(xp, int kh, int kw, int stride, int out_h, int out_w):
    xp = np.ascontiguousarray(xp)
    n, c = xp.shape[0], xp.shape[1]
    out = np.empty((n, c, out_h, out_w), dtype=xp.dtype)
    arg = np.empty((n, c, out_h, out_w), dtype=np.int64)
    _maxpool_forward(xp, out, arg, kh, kw, stride)
    return out, arg


def _maxpool_backward(const real[:, :, :, ::1] grad, const cnp.int64_t[:, :, :, ::1] arg,
                      real[:, :, ::1] gx):
    cdef Py_ssize_t n, c, oy, ox
    cdef Py_ssize_t nb = grad.shape[0], nc = grad.shape[1]
    cdef Py_ssize_t out_h = grad.shape[2], out_w = grad.shape[3]
    with nogil:
        for n in range(nb):
            for c in range(nc):
                for oy in range(out_h):
                    for ox in range(out_w):
                        gx[n * nc + c, 0, arg[n, c, oy, ox]] += grad[n, c, oy, ox]


def maxpool_backward(grad, arg, int hp, int wp):
    grad = np.ascontiguousarray(grad)
    n, c = grad.shape[0], grad.shape[1]
    gx = np.zeros((n * c, 1, hp * wp), dtype=grad.dtype)
    _maxpool_backward(grad, np.ascontiguousarray(arg), gx)
    return gx.reshape(n, c, hp, wp)


def _avgpool_forward(const real[:, :, :, ::1] xp, const real[:, ::1] valid,
                     real[:, :, :, ::1] out, real[:, ::1] count,
                     int kh, int kw, int stride):
    cdef Py_ssize_t n, c, oy, ox, i, j
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1]
    cdef Py_ssize_t out_h = out.shape[2], out_w = out.shape[3]
    cdef real acc, cnt
    with nogil:
        for oy in range(out_h):
            for ox in range(out_w):
                cnt = 0
                for i in range(kh):
                    for j in range(kw):
                        cnt = cnt + valid[oy * stride + i, ox * stride + j]
                count[oy, ox] = cnt
        for n in range(nb):
            for c in range(nc):
                for oy in range(out_h):
                    for ox in range(out_w):
                        acc = 0
                        for i in range(kh):
                            for j in range(kw):
                                acc = acc + xp[n, c, oy * stride + i, ox * stride + j]
                        out[n, c, oy, ox] = acc / count[oy, ox]


def avgpool_forward(xp, valid, int kh, int kw, int stride, int out_h, int out_w):
    xp = np.ascontiguousarray(xp)
    valid = np.ascontiguousarray(valid, dtype=xp.dtype)
    n, c = xp.shape[0], xp.shape[1]
    out = np.empty((n, c, out_h, out_w), dtype=xp.dtype)
    count = np.empty((out_h, out_w), dtype=xp.dtype)
    _avgpool_forward(xp, valid, out, count, kh, kw, stride)
    return out, count


def _avgpool_backward(const real[:, :, :, ::1] grad, const real[:, ::1] count,
                      real[:, :, :, ::1] gx, int kh, int kw, int stride):
    cdef Py_ssize_t n, c, oy, ox, i, j
    cdef Py_ssize_t nb = grad.shape[0], nc = grad.shape[1]
    cdef Py_ssize_t out_h = grad.shape[2], out_w = grad.shape[3]
    cdef real share
    with nogil:
        for n in range(nb):
            for c in range(nc):
                for oy in range(out_h):
                    for ox in range(out_w):
                        share = grad[n, c, oy, ox] / count[oy, ox]
                        for i in range(kh):
                            for j in range(kw):
                                gx[n, c, oy * stride + i, ox * stride + j] += share


def avgpool_backward(grad, count, int hp, int wp, int kh, int kw, int stride):
    grad = np.ascontiguousarray(grad)
    count = np.ascontiguousarray(count, dtype=grad.dtype)
    gx = np.zeros((grad.shape[0], grad.shape[1], hp, wp), dtype=grad.dtype)
    _avgpool_backward(grad, count, gx, kh, kw, stride)
    return gx


def ace_pairwise(channel, double alpha):
    cdef const double[:, ::1] img = np.ascontiguousarray(channel, dtype=np.float64)
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t y0, x0, y1, x1
    cdef double acc, d, v, dy, dx
    with nogil:
        for y0 in range(h):
            for x0 in range(w):
                acc = 0.0
                v = img[y0, x0]
                for y1 in range(h):
                    dy = <double>(y0 - y1)
                    for x1 in range(w):
                        if y1 == y0 and x1 == x0:
                            continue
                        dx = <double>(x0 - x1)
                        d = alpha * (v - img[y1, x1])
                        if d > 1.0:
                            d = 1.0
                        elif d < -1.0:
                            d = -1.0
                        acc = acc + d / sqrt(dy * dy + dx * dx)
                out[y0, x0] = acc
    return out_arr
