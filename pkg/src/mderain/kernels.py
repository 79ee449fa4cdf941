"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``MDRN_KERNELS=python`` forces the fallback.
"""

import os

import numpy as np

from mderain import _kernels_py

try:
    if os.environ.get("MDRN_KERNELS", "").lower() == "python":
        raise ImportError("python kernels forced")
    from mderain import _ckernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"

_SUPPORTED = (np.float32, np.float64)


def _impl(dtype):
    if _compiled is not None and dtype in _SUPPORTED:
        return _compiled
    return _kernels_py


def im2col(xp, kh, kw, stride, dilation, out_h, out_w):
    return _impl(xp.dtype.type).im2col(xp, kh, kw, stride, dilation, out_h, out_w)


def col2im(cols, hp, wp, stride, dilation):
    return _impl(cols.dtype.type).col2im(cols, hp, wp, stride, dilation)


def box_sum(img, r):
    return _impl(img.dtype.type).box_sum(img, r)
