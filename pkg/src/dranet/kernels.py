"""Convolution lowering kernels with backend selection.

Two interchangeable implementations of im2col/col2im exist: a compiled
Cython extension and a pure-numpy fallback built on stride tricks. The
compiled backend is preferred when importable; set ``DRANET_PURE_NUMPY=1``
to force the fallback (useful for benchmarking and debugging). Both
backends produce bitwise-identical results.
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("DRANET_PURE_NUMPY", "0") not in ("", "0")

try:
    if _FORCE_NUMPY:
        raise ImportError("pure-numpy backend forced via DRANET_PURE_NUMPY")
    from . import _convkernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "numpy"


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"convolution output collapsed: size={size} kernel={kernel} "
            f"stride={stride} pad={pad}"
        )
    return out


def im2col_numpy(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Pure-numpy patch extraction: (B,C,H,W) -> (B, C*kh*kw, OH*OW)."""
    b, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(b, c * kh * kw, oh * ow)


def col2im_numpy(cols: np.ndarray, h: int, w: int, kh: int, kw: int,
                 stride: int, pad: int) -> np.ndarray:
    """Scatter-add columns back to the input grid (adjoint of im2col)."""
    b = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if pad:
        return padded[:, :, pad:pad + h, pad:pad + w].copy()
    return padded


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    if _compiled is not None and x.dtype in (np.float32, np.float64):
        return _compiled.im2col(np.ascontiguousarray(x), kh, kw, stride, pad)
    return im2col_numpy(x, kh, kw, stride, pad)


def col2im(cols: np.ndarray, h: int, w: int, kh: int, kw: int,
           stride: int, pad: int) -> np.ndarray:
    if _compiled is not None and cols.dtype in (np.float32, np.float64):
        return _compiled.col2im(np.ascontiguousarray(cols), h, w, kh, kw, stride, pad)
    return col2im_numpy(cols, h, w, kh, kw, stride, pad)
