"""Light-field layouts and the exact index transforms between them.

A light field is stored as an array indexed ``(u, v, h, w, c)``. The
macro-pixel image (MPI) tiles it into a 2-D image where the ``A x A``
angular samples of spatial position ``(h, w)`` form one macro-pixel::

    mpi[h * A + u, w * A + v, c] == lf[u, v, h, w, c]

All transforms are pure reshapes/transposes, accept any number of leading
batch axes, and work on both numpy arrays and :class:`~mderain.tensor.Tensor`
(in which case they are differentiable).
"""

from dataclasses import dataclass

import numpy as np

from mderain import tensor as T
from mderain.tensor import Tensor


class LayoutError(ValueError):
    """Raised when an array does not fit the requested light-field layout."""


@dataclass(frozen=True)
class LfGeometry:
    angular: int
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.angular, self.height, self.width, self.channels) < 1:
            raise LayoutError(f"invalid geometry {self}")

    @classmethod
    def of_lf(cls, lf):
        u, v, h, w, c = lf.shape[-5:]
        if u != v:
            raise LayoutError(f"only square angular grids are supported, got {u}x{v}")
        return cls(u, h, w, c)

    @classmethod
    def of_mpi(cls, mpi, angular):
        y, x, c = mpi.shape[-3:]
        if y % angular or x % angular:
            raise LayoutError(f"MPI of size {y}x{x} is not divisible by angular size {angular}")
        return cls(angular, y // angular, x // angular, c)

    @property
    def mpi_shape(self):
        return (self.angular * self.height, self.angular * self.width, self.channels)

    @property
    def central_view(self):
        return (self.angular // 2, self.angular // 2)


def _reshape(x, shape):
    return T.reshape(x, shape) if isinstance(x, Tensor) else x.reshape(shape)


def _transpose(x, axes):
    return T.transpose(x, axes) if isinstance(x, Tensor) else x.transpose(axes)


def sai_to_mpi(lf):
    """``(..., A, A, H, W, C)`` -> ``(..., A*H, A*W, C)``."""
    if lf.ndim < 5:
        raise LayoutError(f"light field needs at least 5 axes, got shape {lf.shape}")
    geo = LfGeometry.of_lf(lf)
    lead = lf.shape[:-5]
    b = len(lead)
    out = _transpose(lf, tuple(range(b)) + tuple(b + i for i in (2, 0, 3, 1, 4)))
    return _reshape(out, lead + geo.mpi_shape)


def mpi_to_sai(mpi, angular):
    """``(..., A*H, A*W, C)`` -> ``(..., A, A, H, W, C)``."""
    if mpi.ndim < 3:
        raise LayoutError(f"MPI needs at least 3 axes, got shape {mpi.shape}")
    geo = LfGeometry.of_mpi(mpi, angular)
    a, h, w, c = geo.angular, geo.height, geo.width, geo.channels
    lead = mpi.shape[:-3]
    b = len(lead)
    out = _reshape(mpi, lead + (h, a, w, a, c))
    return _transpose(out, tuple(range(b)) + tuple(b + i for i in (1, 3, 0, 2, 4)))


def view_pixel_unshuffle(mpi, angular, factor):
    """Move each view's ``factor x factor`` spatial blocks into channels.

    Output channel ``c * factor**2 + i * factor + j`` holds in-block offset
    ``(i, j)`` of input channel ``c``; the result is again a canonical MPI
    with spatial size divided by ``factor``.
    """
    if factor == 1:
        return mpi
    geo = LfGeometry.of_mpi(mpi, angular)
    a, s, c = angular, factor, geo.channels
    if geo.height % s or geo.width % s:
        raise LayoutError(f"view size {geo.height}x{geo.width} is not divisible by {s}")
    h, w = geo.height // s, geo.width // s
    lead = mpi.shape[:-3]
    b = len(lead)
    # (h', i, u, w', j, v, c) -> (h', u, w', v, c, i, j)
    out = _reshape(mpi, lead + (h, s, a, w, s, a, c))
    out = _transpose(out, tuple(range(b)) + tuple(b + i for i in (0, 2, 3, 5, 6, 1, 4)))
    return _reshape(out, lead + (h * a, w * a, c * s * s))


def view_pixel_shuffle(mpi, angular, factor):
    """Inverse of :func:`view_pixel_unshuffle`."""
    if factor == 1:
        return mpi
    geo = LfGeometry.of_mpi(mpi, angular)
    a, s = angular, factor
    if geo.channels % (s * s):
        raise LayoutError(f"{geo.channels} channels are not divisible by {s * s}")
    c = geo.channels // (s * s)
    h, w = geo.height, geo.width
    lead = mpi.shape[:-3]
    b = len(lead)
    out = _reshape(mpi, lead + (h, a, w, a, c, s, s))
    # (h', u, w', v, c, i, j) -> (h', i, u, w', j, v, c)
    out = _transpose(out, tuple(range(b)) + tuple(b + i for i in (0, 5, 1, 2, 6, 3, 4)))
    return _reshape(out, lead + (h * s * a, w * s * a, c))


def extract_epi(lf, axis, fixed_angular, fixed_spatial):
    """Slice an epipolar plane image out of a ``(U, V, H, W, C)`` light field.

    ``axis="horizontal"`` fixes ``(v, h)`` and returns ``(U, W, C)``;
    ``axis="vertical"`` fixes ``(u, w)`` and returns ``(V, H, C)``.
    """
    u_n, v_n, h_n, w_n = lf.shape[:4]
    if axis == "horizontal":
        bounds = (v_n, h_n)
    elif axis == "vertical":
        bounds = (u_n, w_n)
    else:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    for idx, n in zip((fixed_angular, fixed_spatial), bounds):
        if not 0 <= idx < n:
            raise IndexError(f"EPI index {idx} out of range [0, {n})")
    if axis == "horizontal":
        return np.array(lf[:, fixed_angular, fixed_spatial, :, :])
    return np.array(lf[fixed_angular, :, :, fixed_spatial, :])


def window_starts(extent, size, stride):
    """Raster window offsets along one axis; the last window is clamped to the edge."""
    if size > extent:
        raise LayoutError(f"window {size} larger than extent {extent}")
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] + size < extent:
        starts.append(extent - size)
    return starts


def crop_patches(lf, size, stride):
    """Crop every view into ``size x size`` patches; all views share each window."""
    h, w = lf.shape[2:4]
    return [
        lf[:, :, y : y + size, x : x + size]
        for y in window_starts(h, size, stride)
        for x in window_starts(w, size, stride)
    ]
