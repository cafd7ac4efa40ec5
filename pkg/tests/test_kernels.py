import numpy as np
import pytest

from dranet import kernels

from oracles import naive_conv2d

rng = np.random.default_rng(7)

SHAPES = [
    ((1, 1, 4, 4), 3, 3, 1, 1),
    ((2, 3, 7, 6), 3, 3, 2, 1),
    ((2, 2, 5, 5), 2, 2, 2, 0),
    ((1, 4, 8, 8), 3, 3, 2, 1),
    ((3, 1, 3, 3), 3, 3, 1, 0),
]


@pytest.mark.parametrize("shape,kh,kw,stride,pad", SHAPES)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_bitwise_equal(shape, kh, kw, stride, pad, dtype):
    if kernels.BACKEND != "compiled":
        pytest.skip("compiled backend not built")
    x = rng.normal(size=shape).astype(dtype)
    ref = kernels.im2col_numpy(x, kh, kw, stride, pad)
    assert np.array_equal(kernels.im2col(x, kh, kw, stride, pad), ref)
    g = rng.normal(size=ref.shape).astype(dtype)
    back_ref = kernels.col2im_numpy(g, shape[2], shape[3], kh, kw, stride, pad)
    assert np.array_equal(kernels.col2im(g, shape[2], shape[3], kh, kw, stride, pad), back_ref)


def test_im2col_conv_matches_naive_loops():
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    cols = kernels.im2col(x, 3, 3, 2, 1)
    out = np.matmul(w.reshape(4, -1), cols).reshape(2, 4, 3, 3)
    for b in range(2):
        expected = naive_conv2d(x[b], w, stride=2, pad=1)
        assert np.allclose(out[b], expected, atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    # <im2col(x), g> == <x, col2im(g)> defines the transpose pairing
    x = rng.normal(size=(2, 2, 6, 6))
    g = rng.normal(size=kernels.im2col(x, 3, 3, 2, 1).shape)
    lhs = float((kernels.im2col(x, 3, 3, 2, 1) * g).sum())
    rhs = float((x * kernels.col2im(g, 6, 6, 3, 3, 2, 1)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_output_size_guard():
    with pytest.raises(ValueError):
        kernels.conv_output_size(2, 5, 1, 0)
