"""Pure numpy versions of the hot kernels.

These are the reference behaviour for the compiled ``_ckernels`` module and
are used automatically when the extension is not built.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, kh, kw, stride, dilation, out_h, out_w):
    """Gather convolution windows of a padded NHWC array.

    Returns a contiguous ``(N, out_h, out_w, kh, kw, C)`` array.
    """
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(n, out_h, out_w, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh * dilation, sw * dilation, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def col2im(cols, hp, wp, stride, dilation):
    """Scatter-add windows back onto a padded NHWC canvas (adjoint of im2col)."""
    n, out_h, out_w, kh, kw, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        y0 = i * dilation
        ys = slice(y0, y0 + stride * (out_h - 1) + 1, stride)
        for j in range(kw):
            x0 = j * dilation
            xs = slice(x0, x0 + stride * (out_w - 1) + 1, stride)
            out[:, ys, xs, :] += cols[:, :, :, i, j, :]
    return out


def box_sum(img, r):
    """Sum over the (2r+1)^2 window around every pixel, windows clipped at borders.

    ``img`` is ``(H, W, C)``.
    """
    out = img
    for axis in (0, 1):
        n = out.shape[axis]
        cum = np.cumsum(out, axis=axis)
        pad = [(0, 0)] * out.ndim
        pad[axis] = (1, 0)
        cum = np.pad(cum, pad)
        idx = np.arange(n)
        hi = np.minimum(idx + r, n - 1) + 1
        lo = np.maximum(idx - r, 0)
        out = np.take(cum, hi, axis=axis) - np.take(cum, lo, axis=axis)
    return out
