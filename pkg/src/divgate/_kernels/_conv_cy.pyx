# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 2-D convolution kernels.

Patch packing builds the column matrix transposed, (C*kh*kw, N*OH*OW), so
the stride-1 inner loops copy whole output rows; BLAS consumes the
transposes via its own flags without materializing them.  Loops are
sequential, so results are deterministic.  The forward can hand back its
patch matrix so the weight gradient skips a second packing pass.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"

ctypedef fused floating:
    float
    double


cdef void _im2col_t(floating[:, :, :, ::1] xp, floating[:, ::1] colsT,
                    Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
                    Py_ssize_t oh, Py_ssize_t ow) noexcept:
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t i, j, y, x, ky, kx, col, row, sy
    cdef floating *src
    cdef floating *dst
    for j in range(c):
        for ky in range(kh):
            for kx in range(kw):
                col = (j * kh + ky) * kw + kx
                for i in range(n):
                    for y in range(oh):
                        row = (i * oh + y) * ow
                        sy = y * sh + ky
                        src = &xp[i, j, sy, kx]
                        dst = &colsT[col, row]
                        if sw == 1:
                            for x in range(ow):
                                dst[x] = src[x]
                        else:
                            for x in range(ow):
                                dst[x] = src[x * sw]


cdef void _col2im_t(floating[:, ::1] colsT, floating[:, :, :, ::1] xp,
                    Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
                    Py_ssize_t oh, Py_ssize_t ow) noexcept:
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t i, j, y, x, ky, kx, col, row, sy
    cdef floating *src
    cdef floating *dst
    for j in range(c):
        for ky in range(kh):
            for kx in range(kw):
                col = (j * kh + ky) * kw + kx
                for i in range(n):
                    for y in range(oh):
                        row = (i * oh + y) * ow
                        sy = y * sh + ky
                        dst = &xp[i, j, sy, kx]
                        src = &colsT[col, row]
                        if sw == 1:
                            for x in range(ow):
                                dst[x] += src[x]
                        else:
                            for x in range(ow):
                                dst[x * sw] += src[x]


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _cols_of(x, kh, kw, stride, pad):
    xp = _pad(x, pad)
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    colsT = np.empty((c * kh * kw, n * oh * ow), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col_t[float](xp, colsT, kh, kw, stride, stride, oh, ow)
    else:
        _im2col_t[double](xp, colsT, kh, kw, stride, stride, oh, ow)
    return colsT, (n, oh, ow)


def conv2d_forward(x, w, stride, pad):
    """Cross-correlate x (N,C,H,W) with w (OC,C,kh,kw) -> (N,OC,OH,OW)."""
    return conv2d_forward_cols(x, w, stride, pad)[0]


def conv2d_forward_cols(x, w, stride, pad):
    """Forward plus the packed patch matrix for reuse in the weight gradient."""
    oc, _, kh, kw = w.shape
    colsT, (n, oh, ow) = _cols_of(x, kh, kw, stride, pad)
    y = np.matmul(colsT.T, w.reshape(oc, -1).T)          # BLAS handles both transposes
    return np.ascontiguousarray(y.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)), colsT


def conv2d_grad_weight_cols(gy, colsT, c, kh, kw):
    """Weight gradient from the cached forward patch matrix."""
    oc = gy.shape[1]
    gym = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, oc)
    return np.matmul(gym.T, colsT.T).reshape(oc, c, kh, kw)


def conv2d_grad_weight(gy, x, stride, pad, kh, kw):
    """Kernel gradient for conv2d_forward; gy is (N,OC,OH,OW)."""
    colsT, _ = _cols_of(x, kh, kw, stride, pad)
    return conv2d_grad_weight_cols(gy, colsT, x.shape[1], kh, kw)


def conv2d_grad_input(gy, w, stride, pad, h, iw):
    """Input gradient for conv2d_forward via a col2im scatter; (N,C,h,iw)."""
    n, oc, oh, ow = gy.shape
    c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    gym = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, oc)
    gcolsT = np.matmul(w.reshape(oc, -1).T, gym.T)
    xp = np.zeros((n, c, h + 2 * pad, iw + 2 * pad), dtype=gy.dtype)
    if gy.dtype == np.float32:
        _col2im_t[float](gcolsT, xp, kh, kw, stride, stride, oh, ow)
    else:
        _col2im_t[double](gcolsT, xp, kh, kw, stride, stride, oh, ow)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:-pad, pad:-pad])
    return xp
