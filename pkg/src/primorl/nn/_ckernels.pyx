# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled MLP kernels: BLAS matmuls with fused bias/activation loops.

Same contract as ``_numpy_kernels``; selected at import by ``_backend``.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

NAME = "compiled"


cdef inline double _sig(double z) noexcept nogil:
    cdef double e
    if z >= 0.0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef void _mm_nn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C) noexcept nogil:
    # C (m,n) = A (m,k) @ B (k,n), all row-major
    cdef int m = A.shape[0], k = A.shape[1], n = B.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N'
    dgemm(&nt, &nt, &n, &m, &k, &one, &B[0, 0], &n, &A[0, 0], &k, &zero, &C[0, 0], &n)


cdef void _mm_nt(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C) noexcept nogil:
    # C (m,n) = A (m,k) @ B.T, with B (n,k) row-major
    cdef int m = A.shape[0], k = A.shape[1], n = B.shape[0]
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N', tt = b'T'
    dgemm(&tt, &nt, &n, &m, &k, &one, &B[0, 0], &k, &A[0, 0], &k, &zero, &C[0, 0], &n)


cdef void _mm_tn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C) noexcept nogil:
    # C (k,n) = A.T @ B, with A (m,k), B (m,n) row-major
    cdef int m = A.shape[0], k = A.shape[1], n = B.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N', tt = b'T'
    dgemm(&nt, &tt, &n, &k, &m, &one, &B[0, 0], &n, &A[0, 0], &k, &zero, &C[0, 0], &n)


cdef void _bias_swish(double[:, ::1] Z, double[::1] b, double[:, ::1] S,
                      double[:, ::1] A) noexcept nogil:
    # Z <- Z + b (biased pre-activation kept for the backward pass),
    # S <- sigmoid(Z), A <- Z * S
    cdef Py_ssize_t i, j
    cdef double z, s
    for i in range(Z.shape[0]):
        for j in range(Z.shape[1]):
            z = Z[i, j] + b[j]
            s = _sig(z)
            Z[i, j] = z
            S[i, j] = s
            A[i, j] = z * s


cdef void _bias_add(double[:, ::1] Y, double[::1] b) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(Y.shape[0]):
        for j in range(Y.shape[1]):
            Y[i, j] += b[j]


cdef void _swish_back(double[:, ::1] dA, double[:, ::1] Z, double[:, ::1] S,
                      double[:, ::1] dZ) noexcept nogil:
    # dZ <- dA * swish'(Z) with swish'(z) = s * (1 + z * (1 - s))
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(dA.shape[0]):
        for j in range(dA.shape[1]):
            s = S[i, j]
            dZ[i, j] = dA[i, j] * (s * (1.0 + Z[i, j] * (1.0 - s)))


cdef void _col_sum(double[:, ::1] M, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    for j in range(M.shape[1]):
        out[j] = 0.0
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            out[j] += M[i, j]


def mlp_forward(list Ws, list bs, cnp.ndarray[cnp.float64_t, ndim=2] X,
                bint need_cache):
    cdef int L = len(Ws)
    cdef int l
    cdef cnp.ndarray A = X, Z, S, Y
    acts = [X]
    zs, sigs = [], []
    for l in range(L - 1):
        Z = np.empty((A.shape[0], (<cnp.ndarray> Ws[l]).shape[1]))
        _mm_nn(A, Ws[l], Z)
        S = np.empty_like(Z)
        A = np.empty_like(Z)
        _bias_swish(Z, bs[l], S, A)
        if need_cache:
            zs.append(Z)
            sigs.append(S)
            acts.append(A)
    Y = np.empty((A.shape[0], (<cnp.ndarray> Ws[L - 1]).shape[1]))
    _mm_nn(A, Ws[L - 1], Y)
    _bias_add(Y, bs[L - 1])
    if not need_cache:
        return Y, None
    return Y, (acts, zs, sigs)


def mlp_vjp(list Ws, list bs, tuple cache, cnp.ndarray[cnp.float64_t, ndim=2] dY):
    acts, zs, sigs = cache
    cdef int L = len(Ws)
    cdef int l
    gWs = [None] * L
    gbs = [None] * L
    cdef cnp.ndarray gW, gb, dA, dZ, W, A_prev
    A_prev = acts[L - 1]
    gW = np.empty(((<cnp.ndarray> Ws[L - 1]).shape[0], (<cnp.ndarray> Ws[L - 1]).shape[1]))
    _mm_tn(A_prev, dY, gW)
    gb = np.empty(dY.shape[1])
    _col_sum(dY, gb)
    gWs[L - 1] = gW
    gbs[L - 1] = gb
    dA = np.empty((dY.shape[0], (<cnp.ndarray> Ws[L - 1]).shape[0]))
    _mm_nt(dY, Ws[L - 1], dA)
    for l in range(L - 2, -1, -1):
        dZ = np.empty_like(dA)
        _swish_back(dA, zs[l], sigs[l], dZ)
        W = Ws[l]
        gW = np.empty((W.shape[0], W.shape[1]))
        _mm_tn(acts[l], dZ, gW)
        gb = np.empty(dZ.shape[1])
        _col_sum(dZ, gb)
        gWs[l] = gW
        gbs[l] = gb
        dA = np.empty((dZ.shape[0], W.shape[0]))
        _mm_nt(dZ, W, dA)
    return gWs, gbs, dA
