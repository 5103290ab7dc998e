# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im around BLAS gemm, and the fused
LSTM gate update. Mirrors the API of ``_npkernels``."""
import numpy as np
from scipy.special import expit

from cython cimport floating
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm, sgemm

NAME = "cython"


cdef inline void _gemm(bint ta, bint tb, int M, int N, int K,
                       floating* A, int lda, floating* B, int ldb,
                       floating beta, floating* C, int ldc) noexcept nogil:
    # row-major C[M, N] = op(A) @ op(B) + beta * C, via column-major BLAS on
    # the transposed problem
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef floating alpha = 1
    if floating is float:
        sgemm(&cb, &ca, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)
    else:
        dgemm(&cb, &ca, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef void _im2col(floating* x, floating* col, int C, int H, int W,
                  int k, int pad) noexcept nogil:
    cdef int c, di, dj, y, xx, sy, off, lo, hi
    cdef int HW = H * W
    cdef floating* dst
    cdef floating* src
    for c in range(C):
        for di in range(k):
            for dj in range(k):
                dst = col + ((c * k + di) * k + dj) * HW
                off = dj - pad
                lo = -off if off < 0 else 0
                hi = W - off if off > 0 else W
                for y in range(H):
                    sy = y + di - pad
                    if sy < 0 or sy >= H:
                        memset(dst + y * W, 0, W * sizeof(floating))
                        continue
                    src = x + (c * H + sy) * W + off
                    for xx in range(lo):
                        dst[y * W + xx] = 0
                    for xx in range(lo, hi):
                        dst[y * W + xx] = src[xx]
                    for xx in range(hi, W):
                        dst[y * W + xx] = 0


cdef void _col2im(floating* col, floating* x, int C, int H, int W,
                  int k, int pad) noexcept nogil:
    # accumulates into x, which the caller zeroes
    cdef int c, di, dj, y, xx, sy, off, lo, hi
    cdef int HW = H * W
    cdef floating* src
    cdef floating* dst
    for c in range(C):
        for di in range(k):
            for dj in range(k):
                src = col + ((c * k + di) * k + dj) * HW
                off = dj - pad
                lo = -off if off < 0 else 0
                hi = W - off if off > 0 else W
                for y in range(H):
                    sy = y + di - pad
                    if sy < 0 or sy >= H:
                        continue
                    dst = x + (c * H + sy) * W + off
                    for xx in range(lo, hi):
                        dst[xx] += src[y * W + xx]


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   b, int pad):
    cdef int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int O = w.shape[0], k = w.shape[2]
    cdef int HW = H * W, CKK = C * k * k
    cdef int n, o, p
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((B, O, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef floating[::1] bias
    cdef floating beta = 0
    cdef floating bv
    cdef floating* optr
    if b is not None:
        bias = b
        beta = 1
    if k == 1:
        cols_arr = np.asarray(x).reshape(B, C, HW)
    else:
        cols_arr = np.empty((B, CKK, HW), dtype=dtype)
    cdef floating[:, :, ::1] cols = cols_arr
    with nogil:
        for n in range(B):
            if k != 1:
                _im2col(&x[n, 0, 0, 0], &cols[n, 0, 0], C, H, W, k, pad)
            if beta != 0:
                for o in range(O):
                    bv = bias[o]
                    optr = &out[n, o, 0, 0]
                    for p in range(HW):
                        optr[p] = bv
            _gemm(False, False, O, HW, CKK, &w[0, 0, 0, 0], CKK,
                  &cols[n, 0, 0], HW, beta, &out[n, 0, 0, 0], HW)
    return out_arr, cols_arr


def conv2d_backward(floating[:, :, :, ::1] gout, x, floating[:, :, :, ::1] w,
                    floating[:, :, ::1] cols, int pad,
                    bint need_x=True, bint need_w=True):
    cdef int B = gout.shape[0], O = gout.shape[1], H = gout.shape[2], W = gout.shape[3]
    cdef int C = w.shape[1], k = w.shape[2]
    cdef int HW = H * W, CKK = C * k * k
    cdef int n, o, p
    cdef floating s
    cdef floating* gptr
    dtype = np.float32 if floating is float else np.float64
    gx_arr = gw_arr = gb_arr = None
    cdef floating[:, :, :, ::1] gw, gx
    cdef floating[::1] gb
    cdef floating[:, ::1] gcol
    if need_w:
        gw_arr = np.empty((O, C, k, k), dtype=dtype)
        gb_arr = np.zeros(O, dtype=dtype)
        gw = gw_arr
        gb = gb_arr
        with nogil:
            for n in range(B):
                _gemm(False, True, O, CKK, HW, &gout[n, 0, 0, 0], HW,
                      &cols[n, 0, 0], HW, 0 if n == 0 else 1, &gw[0, 0, 0, 0], CKK)
                for o in range(O):
                    s = 0
                    gptr = &gout[n, o, 0, 0]
                    for p in range(HW):
                        s = s + gptr[p]
                    gb[o] += s
    if need_x:
        if k == 1:
            gx_arr = np.empty((B, C, H, W), dtype=dtype)
            gx = gx_arr
            with nogil:
                for n in range(B):
                    _gemm(True, False, C, HW, O, &w[0, 0, 0, 0], C,
                          &gout[n, 0, 0, 0], HW, 0, &gx[n, 0, 0, 0], HW)
        else:
            gx_arr = np.zeros((B, C, H, W), dtype=dtype)
            gx = gx_arr
            gcol_arr = np.empty((CKK, HW), dtype=dtype)
            gcol = gcol_arr
            with nogil:
                for n in range(B):
                    _gemm(True, False, CKK, HW, O, &w[0, 0, 0, 0], CKK,
                          &gout[n, 0, 0, 0], HW, 0, &gcol[0, 0], HW)
                    _col2im(&gcol[0, 0], &gx[n, 0, 0, 0], C, H, W, k, pad)
    return gx_arr, gw_arr, gb_arr


def gate_forward(floating[:, :, :, ::1] pre, floating[:, :, :, ::1] mem):
    # numpy's tanh/expit are SIMD-vectorised and beat scalar libm calls, so
    # only the cell update f * mem + i * g is fused here
    cdef Py_ssize_t B = mem.shape[0], C = mem.shape[1], HW = mem.shape[2] * mem.shape[3]
    cdef Py_ssize_t n, c, p
    cdef floating *ag
    cdef floating *ai
    cdef floating *af
    cdef floating *pm
    cdef floating *po
    dtype = np.float32 if floating is float else np.float64
    if pre.shape[1] != 3 * C:
        raise ValueError(f"gate pre-activation needs {3 * C} channels, got {pre.shape[1]}")
    pre_arr = np.asarray(pre)
    act_arr = np.empty((B, 3 * C, mem.shape[2], mem.shape[3]), dtype=dtype)
    np.tanh(pre_arr[:, :C], out=act_arr[:, :C])
    expit(pre_arr[:, C:], out=act_arr[:, C:])
    out_arr = np.empty((B, C, mem.shape[2], mem.shape[3]), dtype=dtype)
    if B == 0 or C == 0 or HW == 0:
        return out_arr, act_arr
    cdef floating[:, :, :, ::1] out = out_arr
    cdef floating[:, :, :, ::1] act = act_arr
    with nogil:
        for n in range(B):
            for c in range(C):
                ag = &act[n, c, 0, 0]
                ai = &act[n, C + c, 0, 0]
                af = &act[n, 2 * C + c, 0, 0]
                pm = &mem[n, c, 0, 0]
                po = &out[n, c, 0, 0]
                for p in range(HW):
                    po[p] = af[p] * pm[p] + ai[p] * ag[p]
    return out_arr, act_arr


def gate_backward(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] mem,
                  floating[:, :, :, ::1] act):
    cdef int B = mem.shape[0], C = mem.shape[1], H = mem.shape[2], W = mem.shape[3]
    cdef int n, c, y, xx
    cdef floating g, i, f, d
    dtype = np.float32 if floating is float else np.float64
    gpre_arr = np.empty((B, 3 * C, H, W), dtype=dtype)
    gmem_arr = np.empty((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] gpre = gpre_arr
    cdef floating[:, :, :, ::1] gmem = gmem_arr
    with nogil:
        for n in range(B):
            for c in range(C):
                for y in range(H):
                    for xx in range(W):
                        d = gout[n, c, y, xx]
                        g = act[n, c, y, xx]
                        i = act[n, C + c, y, xx]
                        f = act[n, 2 * C + c, y, xx]
                        gpre[n, c, y, xx] = d * i * (1 - g * g)
                        gpre[n, C + c, y, xx] = d * g * i * (1 - i)
                        gpre[n, 2 * C + c, y, xx] = d * mem[n, c, y, xx] * f * (1 - f)
                        gmem[n, c, y, xx] = d * f
    return gpre_arr, gmem_arr
