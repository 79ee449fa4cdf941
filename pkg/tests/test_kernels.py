import numpy as np
import pytest

from mderain import _kernels_py, kernels

_ckernels = pytest.importorskip("mderain._ckernels")


def box_loops(img, r):
    h, w = img.shape[:2]
    out = np.zeros_like(img, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            out[y, x] = img[max(0, y - r) : y + r + 1, max(0, x - r) : x + r + 1].sum(axis=(0, 1))
    return out


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride,dilation", [(1, 1), (1, 3), (3, 1), (2, 2)])
def test_im2col_col2im_backends_agree(rng, dtype, stride, dilation):
    xp = rng.standard_normal((2, 13, 11, 3)).astype(dtype)
    oh = (13 - dilation * 2 - 1) // stride + 1
    ow = (11 - dilation * 2 - 1) // stride + 1
    a = _kernels_py.im2col(xp, 3, 3, stride, dilation, oh, ow)
    b = _ckernels.im2col(xp, 3, 3, stride, dilation, oh, ow)
    np.testing.assert_array_equal(a, b)
    cols = rng.standard_normal(a.shape).astype(dtype)
    np.testing.assert_allclose(
        _kernels_py.col2im(cols, 13, 11, stride, dilation), _ckernels.col2im(cols, 13, 11, stride, dilation), rtol=1e-5, atol=1e-5
    )


@pytest.mark.parametrize("kh,kw,c,stride,dilation", [(11, 1, 1, 1, 1), (1, 11, 1, 1, 1), (3, 2, 3, 2, 1), (5, 5, 1, 1, 2), (1, 1, 16, 1, 1)])
def test_im2col_backends_agree_on_odd_shapes(rng, kh, kw, c, stride, dilation):
    xp = rng.standard_normal((3, 17, 15, c))
    oh = (17 - dilation * (kh - 1) - 1) // stride + 1
    ow = (15 - dilation * (kw - 1) - 1) // stride + 1
    np.testing.assert_array_equal(
        _kernels_py.im2col(xp, kh, kw, stride, dilation, oh, ow), _ckernels.im2col(xp, kh, kw, stride, dilation, oh, ow)
    )


def test_col2im_is_adjoint_of_im2col(rng):
    xp = rng.standard_normal((1, 9, 9, 2))
    cols = rng.standard_normal((1, 3, 3, 3, 3, 2))
    for k in (_kernels_py, _ckernels):
        lhs = (k.im2col(xp, 3, 3, 1, 3, 3, 3) * cols).sum()
        rhs = (xp * k.col2im(cols, 9, 9, 1, 3)).sum()
        assert abs(lhs - rhs) < 1e-10


@pytest.mark.parametrize("r", [0, 1, 4, 20])
def test_box_sum_matches_loops(rng, r):
    img = rng.random((17, 12, 3))
    expect = box_loops(img, r)
    np.testing.assert_allclose(_kernels_py.box_sum(img, r), expect, rtol=1e-12)
    np.testing.assert_allclose(_ckernels.box_sum(img, r), expect, rtol=1e-12)
    # float32 running sums carry absolute round-off on the order of eps * window total
    np.testing.assert_allclose(_ckernels.box_sum(img.astype(np.float32), r), expect, atol=1e-5 * expect.max())
