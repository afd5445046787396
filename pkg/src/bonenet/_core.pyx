# cython: boundscheck=False, wraparound=False, language_level=3
"""Cython bindings for the compiled conv / max-pool kernels."""

import numpy as np

cimport numpy as cnp

cdef extern from "_core_impl.h" nogil:
    void bn_conv2d_fwd(const double* xp, const double* w, const double* bias,
                       double* out, long B, long C, long Hp, long Wp,
                       long O, long kh, long kw)
    void bn_conv2d_bwd_w(const double* xp, const double* dy, double* dw,
                         long B, long C, long Hp, long Wp,
                         long O, long kh, long kw)
    void bn_maxpool2d_fwd(const double* x, double* out, long long* idx,
                          long B, long C, long H, long W, long win, long stride)
    void bn_maxpool2d_bwd(const double* dy, const long long* idx, double* dx,
                          long B, long C, long HW_in, long HW_out)


def conv2d_fwd(double[:, :, :, ::1] xp, double[:, :, :, ::1] w, bias):
    """Stride-1 cross-correlation over a pre-padded input."""
    cdef long B = xp.shape[0], C = xp.shape[1], Hp = xp.shape[2], Wp = xp.shape[3]
    cdef long O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef long Ho = Hp - kh + 1, Wo = Wp - kw + 1
    out_np = np.empty((B, O, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_np
    cdef double[::1] bv
    cdef const double* bptr = NULL
    if bias is not None:
        bv = np.ascontiguousarray(bias, dtype=np.float64)
        bptr = &bv[0]
    with nogil:
        bn_conv2d_fwd(&xp[0, 0, 0, 0], &w[0, 0, 0, 0], bptr,
                      &out[0, 0, 0, 0], B, C, Hp, Wp, O, kh, kw)
    return out_np


def conv2d_bwd_w(double[:, :, :, ::1] xp, double[:, :, :, ::1] dy, long kh, long kw):
    cdef long B = xp.shape[0], C = xp.shape[1], Hp = xp.shape[2], Wp = xp.shape[3]
    cdef long O = dy.shape[1]
    dw_np = np.empty((O, C, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dw = dw_np
    with nogil:
        bn_conv2d_bwd_w(&xp[0, 0, 0, 0], &dy[0, 0, 0, 0], &dw[0, 0, 0, 0],
                        B, C, Hp, Wp, O, kh, kw)
    return dw_np


def maxpool2d_fwd(double[:, :, :, ::1] x, long win, long stride):
    cdef long B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef long Ho = (H - win) // stride + 1, Wo = (W - win) // stride + 1
    out_np = np.empty((B, C, Ho, Wo), dtype=np.float64)
    idx_np = np.empty((B, C, Ho, Wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_np
    cdef long long[:, :, :, ::1] idx = idx_np
    with nogil:
        bn_maxpool2d_fwd(&x[0, 0, 0, 0], &out[0, 0, 0, 0], &idx[0, 0, 0, 0],
                         B, C, H, W, win, stride)
    return out_np, idx_np


def maxpool2d_bwd(double[:, :, :, ::1] dy, long long[:, :, :, ::1] idx, long H, long W):
    cdef long B = dy.shape[0], C = dy.shape[1]
    cdef long HW_out = dy.shape[2] * dy.shape[3]
    dx_np = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_np
    with nogil:
        bn_maxpool2d_bwd(&dy[0, 0, 0, 0], &idx[0, 0, 0, 0], &dx[0, 0, 0, 0],
                         B, C, H * W, HW_out)
    return dx_np
