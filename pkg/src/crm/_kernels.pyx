# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled NHWC kernels for patch extraction and 2x2 max pooling.

Same signatures and results as :mod:`crm._kernels_py`.
"""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

cdef extern from "_conv.h" nogil:
    void conv_fwd(const double *xp, const double *w, const double *bias, double *out,
                  Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t Cin, Py_ssize_t Cout,
                  Py_ssize_t k)
    void conv_bwd_weight(const double *xp, const double *g, double *out, Py_ssize_t B,
                         Py_ssize_t H, Py_ssize_t W, Py_ssize_t Cin, Py_ssize_t Cout, Py_ssize_t k)

cnp.import_array()


def im2col(double[:, :, :, ::1] x, int k):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t p = (k - 1) // 2
    cdef Py_ssize_t row_len = k * k * C
    out_arr = np.empty((B * H * W, row_len), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, h, w, dy, dx, sy, sx, r, off
    cdef size_t nbytes = C * sizeof(double)
    with nogil:
        r = 0
        for b in range(B):
            for h in range(H):
                for w in range(W):
                    off = 0
                    for dy in range(k):
                        sy = h + dy - p
                        for dx in range(k):
                            sx = w + dx - p
                            if sy < 0 or sy >= H or sx < 0 or sx >= W:
                                memset(&out[r, off], 0, nbytes)
                            else:
                                memcpy(&out[r, off], &x[b, sy, sx, 0], nbytes)
                            off = off + C
                    r = r + 1
    return out_arr


def col2im(double[:, ::1] cols, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W,
           Py_ssize_t C, int k):
    # tap-major accumulation order, matching the numpy fallback bit for bit
    cdef Py_ssize_t p = (k - 1) // 2
    out_arr = np.zeros((B, H, W, C), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, h, w, dy, dx, sy, sx, c, r, off
    with nogil:
        for dy in range(k):
            for dx in range(k):
                off = (dy * k + dx) * C
                for b in range(B):
                    for h in range(H):
                        sy = h + dy - p
                        if sy < 0 or sy >= H:
                            continue
                        r = (b * H + h) * W
                        for w in range(W):
                            sx = w + dx - p
                            if 0 <= sx < W:
                                for c in range(C):
                                    out[b, sy, sx, c] += cols[r + w, off + c]
    return out_arr


def maxpool2_forward(double[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = (H + 1) // 2, Wo = (W + 1) // 2
    out_arr = np.empty((B, Ho, Wo, C), dtype=np.float64)
    idx_arr = np.empty((B, Ho, Wo, C), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, i, j, c, y, xx, y0, x0, best_i
    cdef double best, v
    with nogil:
        for b in range(B):
            for i in range(Ho):
                y0 = 2 * i
                for j in range(Wo):
                    x0 = 2 * j
                    for c in range(C):
                        best = x[b, y0, x0, c]
                        best_i = y0 * W + x0
                        for y in range(y0, min(y0 + 2, H)):
                            for xx in range(x0, min(x0 + 2, W)):
                                v = x[b, y, xx, c]
                                # the first NaN wins, as with numpy's argmax
                                if v > best or (v != v and best == best):
                                    best = v
                                    best_i = y * W + xx
                        out[b, i, j, c] = best
                        idx[b, i, j, c] = best_i
    return out_arr, idx_arr


def maxpool2_backward(double[:, :, :, ::1] grad, cnp.int64_t[:, :, :, ::1] idx,
                      Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = grad.shape[0], Ho = grad.shape[1], Wo = grad.shape[2]
    cdef Py_ssize_t C = grad.shape[3]
    out_arr = np.zeros((B, H, W, C), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, c, f
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        f = idx[b, i, j, c]
                        out[b, f // W, f % W, c] += grad[b, i, j, c]
    return out_arr


def conv2d_padded(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] w,
                  const double[::1] bias):
    """Convolution of an input already zero-padded by ``(k - 1) // 2`` per side."""
    cdef Py_ssize_t k = w.shape[0], Cin = w.shape[2], Cout = w.shape[3]
    cdef Py_ssize_t B = xp.shape[0], H = xp.shape[1] - k + 1, W = xp.shape[2] - k + 1
    if xp.shape[3] != Cin or bias.shape[0] != Cout or H < 1 or W < 1:
        raise ValueError("conv2d_padded: shape mismatch")
    out_arr = np.empty((B, H, W, Cout), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        conv_fwd(&xp[0, 0, 0, 0], &w[0, 0, 0, 0], &bias[0], &out[0, 0, 0, 0], B, H, W, Cin, Cout, k)
    return out_arr


def conv2d_weight_grad_padded(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] g, int k):
    """Kernel gradient ``k x k x Cin x Cout`` from a padded input and the output gradient."""
    cdef Py_ssize_t B = g.shape[0], H = g.shape[1], W = g.shape[2], Cout = g.shape[3]
    cdef Py_ssize_t Cin = xp.shape[3]
    if xp.shape[0] != B or xp.shape[1] != H + k - 1 or xp.shape[2] != W + k - 1:
        raise ValueError("conv2d_weight_grad_padded: shape mismatch")
    out_arr = np.empty((k, k, Cin, Cout), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        conv_bwd_weight(&xp[0, 0, 0, 0], &g[0, 0, 0, 0], &out[0, 0, 0, 0], B, H, W, Cin, Cout, k)
    return out_arr
