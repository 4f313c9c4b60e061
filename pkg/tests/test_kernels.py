import numpy as np
import pytest

from calibra import _kernels_py, kernels

pytestmark = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,stride,padding", [(3, 1, 1), (1, 1, 0), (2, 1, 0), (3, 2, 1)])
def test_im2col_col2im_match_fallback(dtype, k, stride, padding, rng):
    x = rng.normal(size=(2, 3, 8, 6)).astype(dtype)
    a = kernels.im2col(x, k, stride, padding)
    b = _kernels_py.im2col(x, k, stride, padding)
    np.testing.assert_array_equal(a, b)
    cols = rng.normal(size=a.shape).astype(dtype)
    np.testing.assert_array_equal(kernels.col2im(cols, x.shape, k, stride, padding),
                                  _kernels_py.col2im(cols, x.shape, k, stride, padding))


def test_maxpool_matches_fallback(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    x[0, 0, :2, :2] = 5.0
    out_c, idx_c = kernels.maxpool_forward(x, 2)
    out_p, idx_p = _kernels_py.maxpool_forward(x, 2)
    np.testing.assert_array_equal(out_c, out_p)
    np.testing.assert_array_equal(idx_c, idx_p)
    g = rng.normal(size=out_c.shape)
    np.testing.assert_array_equal(kernels.maxpool_backward(g, idx_c, 2),
                                  _kernels_py.maxpool_backward(g, idx_p, 2))


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    cols = kernels.im2col(x, 3, 1, 1)
    y = rng.normal(size=cols.shape)
    lhs = (cols * y).sum()
    rhs = (x * kernels.col2im(y, x.shape, 3, 1, 1)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)
