# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im kernels, the hot path of convolution lowering."""

import numpy as np

cimport cython

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    """Lower (B, C, H, W) into (B, C*kh*kw, OH*OW) patch columns."""
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((b, c * kh * kw, oh * ow), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t bb, cc, i, j, p, q, row, ih, iw
    with nogil:
        for bb in range(b):
            for cc in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (cc * kh + i) * kw + j
                        for p in range(oh):
                            ih = p * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            for q in range(ow):
                                iw = q * stride - pad + j
                                if 0 <= iw < w:
                                    out[bb, row, p * ow + q] = x[bb, cc, ih, iw]
    return out_arr


def col2im(floating[:, :, ::1] cols, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    """Scatter-add (B, C*kh*kw, OH*OW) columns back onto a (B, C, H, W) grid."""
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t c = cols.shape[1] // (kh * kw)
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bb, cc, i, j, p, q, row, ih, iw
    with nogil:
        for bb in range(b):
            for cc in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (cc * kh + i) * kw + j
                        for p in range(oh):
                            ih = p * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            for q in range(ow):
                                iw = q * stride - pad + j
                                if 0 <= iw < w:
                                    out[bb, cc, ih, iw] += cols[bb, row, p * ow + q]
    return out_arr
