# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather/scatter kernels for convolution and box filtering.

Same signatures and results as :mod:`mderain._kernels_py`. Loops run in a
fixed order so results are deterministic.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] xp, real[:, :, :, :, :, ::1] out,
            int kh, int kw, int stride, int dilation):
    cdef Py_ssize_t n, oy, ox, i, j, c
    cdef Py_ssize_t N = out.shape[0], OH = out.shape[1], OW = out.shape[2]
    cdef Py_ssize_t C = xp.shape[3]
    cdef Py_ssize_t s_n = xp.shape[1] * xp.shape[2] * C, s_y = xp.shape[2] * C
    cdef Py_ssize_t run = kw * C, s_ox = kh * kw * C, s_x = stride * C
    cdef real *src = &xp[0, 0, 0, 0]
    cdef real *base = &out[0, 0, 0, 0, 0, 0]
    cdef real *row
    cdef real *dst
    with nogil:
        for n in range(N):
            for oy in range(OH):
                for i in range(kh):
                    # output x innermost: one strided sweep per kernel row, fast even when C is 1
                    row = src + n * s_n + (oy * stride + i * dilation) * s_y
                    dst = base + (n * OH + oy) * OW * s_ox + i * run
                    if dilation == 1 and run < 8:
                        # short runs (single-channel blur): sweep x innermost instead
                        for c in range(run):
                            for ox in range(OW):
                                dst[ox * s_ox + c] = row[ox * s_x + c]
                    elif dilation == 1:
                        # the kw taps of one kernel row are adjacent in memory
                        for ox in range(OW):
                            for c in range(run):
                                dst[ox * s_ox + c] = row[ox * s_x + c]
                    else:
                        for ox in range(OW):
                            for j in range(kw):
                                for c in range(C):
                                    dst[ox * s_ox + j * C + c] = row[ox * s_x + j * dilation * C + c]


def _col2im(real[:, :, :, :, :, ::1] cols, real[:, :, :, ::1] out,
            int stride, int dilation):
    cdef Py_ssize_t n, oy, ox, i, j, c, y, x
    cdef Py_ssize_t N = cols.shape[0], OH = cols.shape[1], OW = cols.shape[2]
    cdef Py_ssize_t KH = cols.shape[3], KW = cols.shape[4], C = cols.shape[5]
    with nogil:
        for n in range(N):
            for oy in range(OH):
                for ox in range(OW):
                    for i in range(KH):
                        y = oy * stride + i * dilation
                        for j in range(KW):
                            x = ox * stride + j * dilation
                            for c in range(C):
                                out[n, y, x, c] += cols[n, oy, ox, i, j, c]


def _box_sum(real[:, :, ::1] img, real[:, :, ::1] out, real[:, :, ::1] tmp, int r):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1], C = img.shape[2]
    cdef Py_ssize_t y, x, c, lo, hi
    cdef real acc
    with nogil:
        # vertical running sums into tmp
        for x in range(W):
            for c in range(C):
                acc = 0
                for y in range(min(r, H - 1) + 1):
                    acc = acc + img[y, x, c]
                for y in range(H):
                    tmp[y, x, c] = acc
                    hi = y + r + 1
                    lo = y - r
                    if hi < H:
                        acc = acc + img[hi, x, c]
                    if lo >= 0:
                        acc = acc - img[lo, x, c]
        for y in range(H):
            for c in range(C):
                acc = 0
                for x in range(min(r, W - 1) + 1):
                    acc = acc + tmp[y, x, c]
                for x in range(W):
                    out[y, x, c] = acc
                    hi = x + r + 1
                    lo = x - r
                    if hi < W:
                        acc = acc + tmp[y, hi, c]
                    if lo >= 0:
                        acc = acc - tmp[y, lo, c]


def im2col(xp, int kh, int kw, int stride, int dilation, int out_h, int out_w):
    xp = np.ascontiguousarray(xp)
    out = np.empty((xp.shape[0], out_h, out_w, kh, kw, xp.shape[3]), dtype=xp.dtype)
    _im2col(xp, out, kh, kw, stride, dilation)
    return out


def col2im(cols, int hp, int wp, int stride, int dilation):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], hp, wp, cols.shape[5]), dtype=cols.dtype)
    _col2im(cols, out, stride, dilation)
    return out


def box_sum(img, int r):
    img = np.ascontiguousarray(img)
    out = np.empty_like(img)
    tmp = np.empty_like(img)
    _box_sum(img, out, tmp, r)
    return out
