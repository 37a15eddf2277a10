# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled conv/pool kernels.

The convolutions run as C im2col buffers feeding BLAS GEMM calls (via
scipy's C-level BLAS bindings), which keeps the whole hot path out of the
interpreter; pooling is direct loops. Same call contract as the NumPy
fallback in ``_kernels_py``: convolution inputs arrive pre-padded, gradients
come back on the padded shape, and max-pool argmax indices are flat
(H, W)-plane offsets with first-occurrence tie breaking.
"""

from libc.string cimport memcpy

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef void _gemm(char transa, char transb, int m, int n, int k,
                real alpha, const real* a, int lda, const real* b, int ldb,
                real beta, real* c, int ldc) noexcept nogil:
    # thin dtype dispatch over the Fortran GEMM entry points
    if real is float:
        sgemm(&transa, &transb, &m, &n, &k, <float*>&alpha, <float*>a, &lda,
              <float*>b, &ldb, <float*>&beta, <float*>c, &ldc)
    else:
        dgemm(&transa, &transb, &m, &n, &k, <double*>&alpha, <double*>a, &lda,
              <double*>b, &ldb, <double*>&beta, <double*>c, &ldc)


cdef void _im2col(const real* xs, real* cols,
                  Py_ssize_t I, Py_ssize_t HP, Py_ssize_t WP,
                  Py_ssize_t KH, Py_ssize_t KW,
                  Py_ssize_t OH, Py_ssize_t OW, Py_ssize_t s) noexcept nogil:
    # cols is (I*KH*KW, OH*OW) row-major for one sample
    cdef Py_ssize_t i, ky, kx, y, x
    cdef Py_ssize_t P = OH * OW
    cdef const real* src
    cdef real* dst
    for i in range(I):
        for ky in range(KH):
            for kx in range(KW):
                dst = cols + ((i * KH + ky) * KW + kx) * P
                for y in range(OH):
                    src = xs + i * HP * WP + (y * s + ky) * WP + kx
                    if s == 1:
                        memcpy(dst + y * OW, src, OW * sizeof(real))
                    else:
                        for x in range(OW):
                            dst[y * OW + x] = src[x * s]


cdef void _col2im_add(const real* cols, real* xs,
                      Py_ssize_t I, Py_ssize_t HP, Py_ssize_t WP,
                      Py_ssize_t KH, Py_ssize_t KW,
                      Py_ssize_t OH, Py_ssize_t OW, Py_ssize_t s) noexcept nogil:
    cdef Py_ssize_t i, ky, kx, y, x
    cdef Py_ssize_t P = OH * OW
    cdef const real* src
    cdef real* dst
    for i in range(I):
        for ky in range(KH):
            for kx in range(KW):
                src = cols + ((i * KH + ky) * KW + kx) * P
                for y in range(OH):
                    dst = xs + i * HP * WP + (y * s + ky) * WP + kx
                    if s == 1:
                        for x in range(OW):
                            dst[x] += src[y * OW + x]
                    else:
                        for x in range(OW):
                            dst[x * s] += src[y * OW + x]


def conv2d_forward(real[:, :, :, ::1] xp, real[:, :, :, ::1] w, real[::1] bias, Py_ssize_t stride):
    cdef Py_ssize_t N = xp.shape[0], I = xp.shape[1], HP = xp.shape[2], WP = xp.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = (HP - KH) // stride + 1
    cdef Py_ssize_t OW = (WP - KW) // stride + 1
    cdef Py_ssize_t K = I * KH * KW, P = OH * OW
    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    out_arr = np.empty((N, O, OH, OW), dtype=dt)
    cols_arr = np.empty((K, P), dtype=dt)
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[:, ::1] cols = cols_arr
    cdef const real* xbase = &xp[0, 0, 0, 0]
    cdef const real* wbase = &w[0, 0, 0, 0]
    cdef real* obase = &out[0, 0, 0, 0]
    cdef real* cbase = &cols[0, 0]
    cdef Py_ssize_t n, o, t
    cdef real* orow
    with nogil:
        for n in range(N):
            _im2col(xbase + n * I * HP * WP, cbase, I, HP, WP, KH, KW, OH, OW, stride)
            # row-major out_n(O,P) = W(O,K) @ cols(K,P), expressed in BLAS
            # column-major terms as out_n^T = cols^T @ W^T
            _gemm(c'N', c'N', <int>P, <int>O, <int>K, <real>1,
                  cbase, <int>P, wbase, <int>K, <real>0,
                  obase + n * O * P, <int>P)
        for n in range(N):
            for o in range(O):
                orow = obase + (n * O + o) * P
                for t in range(P):
                    orow[t] += bias[o]
    return out_arr


def conv2d_backward_input(real[:, :, :, ::1] gout, real[:, :, :, ::1] w, xp_shape, Py_ssize_t stride):
    cdef Py_ssize_t N = gout.shape[0], O = gout.shape[1], OH = gout.shape[2], OW = gout.shape[3]
    cdef Py_ssize_t I = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t HP = xp_shape[2], WP = xp_shape[3]
    cdef Py_ssize_t K = I * KH * KW, P = OH * OW
    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    gxp_arr = np.zeros(xp_shape, dtype=dt)
    gcols_arr = np.empty((K, P), dtype=dt)
    cdef real[:, :, :, ::1] gxp = gxp_arr
    cdef real[:, ::1] gcols = gcols_arr
    cdef const real* gbase = &gout[0, 0, 0, 0]
    cdef const real* wbase = &w[0, 0, 0, 0]
    cdef real* xbase = &gxp[0, 0, 0, 0]
    cdef real* cbase = &gcols[0, 0]
    cdef Py_ssize_t n
    with nogil:
        for n in range(N):
            # row-major gcols(K,P) = W(O,K)^T @ gout_n(O,P)
            _gemm(c'N', c'T', <int>P, <int>K, <int>O, <real>1,
                  gbase + n * O * P, <int>P, wbase, <int>K, <real>0,
                  cbase, <int>P)
            _col2im_add(cbase, xbase + n * I * HP * WP, I, HP, WP, KH, KW, OH, OW, stride)
    return gxp_arr


def conv2d_backward_weight(real[:, :, :, ::1] gout, real[:, :, :, ::1] xp, kshape, Py_ssize_t stride):
    cdef Py_ssize_t N = gout.shape[0], O = gout.shape[1], OH = gout.shape[2], OW = gout.shape[3]
    cdef Py_ssize_t I = xp.shape[1], HP = xp.shape[2], WP = xp.shape[3]
    cdef Py_ssize_t KH = kshape[2], KW = kshape[3]
    cdef Py_ssize_t K = I * KH * KW, P = OH * OW
    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    gw_arr = np.zeros(kshape, dtype=dt)
    cols_arr = np.empty((K, P), dtype=dt)
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[:, ::1] cols = cols_arr
    cdef const real* gbase = &gout[0, 0, 0, 0]
    cdef const real* xbase = &xp[0, 0, 0, 0]
    cdef real* wbase = &gw[0, 0, 0, 0]
    cdef real* cbase = &cols[0, 0]
    cdef Py_ssize_t n
    with nogil:
        for n in range(N):
            _im2col(xbase + n * I * HP * WP, cbase, I, HP, WP, KH, KW, OH, OW, stride)
            # row-major gw(O,K) += gout_n(O,P) @ cols(K,P)^T
            _gemm(c'T', c'N', <int>K, <int>O, <int>P, <real>1,
                  cbase, <int>P, gbase + n * O * P, <int>P, <real>1,
                  wbase, <int>K)
    return gw_arr


cdef void _maxpool_fwd(const real* x, real* out, cnp.int64_t* arg,
                       Py_ssize_t NC, Py_ssize_t H, Py_ssize_t W,
                       Py_ssize_t OH, Py_ssize_t OW,
                       Py_ssize_t window, Py_ssize_t stride) noexcept nogil:
    cdef Py_ssize_t plane = H * W, oplane = OH * OW
    cdef Py_ssize_t nc, oy, ox, wy, wx, iy, ix, base, obase
    cdef real best, v
    cdef Py_ssize_t bi
    for nc in range(NC):
        base = nc * plane
        obase = nc * oplane
        for oy in range(OH):
            for ox in range(OW):
                iy = oy * stride
                ix = ox * stride
                best = x[base + iy * W + ix]
                bi = iy * W + ix
                for wy in range(window):
                    for wx in range(window):
                        v = x[base + (iy + wy) * W + ix + wx]
                        if v > best:  # keep first occurrence on ties
                            best = v
                            bi = (iy + wy) * W + ix + wx
                out[obase + oy * OW + ox] = best
                arg[obase + oy * OW + ox] = bi


def maxpool2d_forward(real[:, :, :, ::1] x, Py_ssize_t window, Py_ssize_t stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H - window) // stride + 1
    cdef Py_ssize_t OW = (W - window) // stride + 1
    if real is float:
        out_arr = np.empty((N, C, OH, OW), dtype=np.float32)
    else:
        out_arr = np.empty((N, C, OH, OW), dtype=np.float64)
    arg_arr = np.empty((N, C, OH, OW), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    with nogil:
        _maxpool_fwd(&x[0, 0, 0, 0], &out[0, 0, 0, 0], &arg[0, 0, 0, 0],
                     N * C, H, W, OH, OW, window, stride)
    return out_arr, arg_arr


def maxpool2d_backward(real[:, :, :, ::1] gout, cnp.int64_t[:, :, :, ::1] arg, x_shape):
    cdef Py_ssize_t NC = gout.shape[0] * gout.shape[1]
    cdef Py_ssize_t oplane = gout.shape[2] * gout.shape[3]
    cdef Py_ssize_t plane = <Py_ssize_t>x_shape[2] * <Py_ssize_t>x_shape[3]
    if real is float:
        gx_arr = np.zeros(x_shape, dtype=np.float32)
    else:
        gx_arr = np.zeros(x_shape, dtype=np.float64)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef const real* gbase = &gout[0, 0, 0, 0]
    cdef const cnp.int64_t* abase = &arg[0, 0, 0, 0]
    cdef real* xbase = &gx[0, 0, 0, 0]
    cdef Py_ssize_t nc, t
    with nogil:
        for nc in range(NC):
            for t in range(oplane):
                xbase[nc * plane + abase[nc * oplane + t]] += gbase[nc * oplane + t]
    return gx_arr
