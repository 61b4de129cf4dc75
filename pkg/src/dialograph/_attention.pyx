# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled typed-neighbourhood attention; same contract as ``_attention_py``."""

import numpy as np
from libc.math cimport exp, sqrt


def attention_forward(q, k, v, masks, head_type):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    cdef const unsigned char[:, :, :, ::1] mk = np.ascontiguousarray(masks).view(np.uint8)
    cdef const Py_ssize_t[::1] ht = np.ascontiguousarray(head_type, dtype=np.intp)
    cdef const double[:, :, :, ::1] Q = q
    cdef const double[:, :, :, ::1] K = k
    cdef const double[:, :, :, ::1] V = v
    cdef Py_ssize_t B = Q.shape[0], H = Q.shape[1], M = Q.shape[2], D = Q.shape[3]
    out_arr = np.zeros((B, H, M, D))
    alpha_arr = np.zeros((B, H, M, M))
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] alpha = alpha_arr
    cdef double scale = 1.0 / sqrt(<double>D)
    cdef Py_ssize_t b, h, i, j, d, t
    cdef double s, mx, tot, a
    cdef bint any_
    with nogil:
        for b in range(B):
            for h in range(H):
                t = ht[h]
                for i in range(M):
                    any_ = False
                    mx = 0.0
                    for j in range(M):
                        if mk[b, t, i, j]:
                            s = 0.0
                            for d in range(D):
                                s = s + Q[b, h, i, d] * K[b, h, j, d]
                            s = s * scale
                            alpha[b, h, i, j] = s
                            if not any_ or s > mx:
                                mx = s
                            any_ = True
                    if not any_:
                        continue
                    tot = 0.0
                    for j in range(M):
                        if mk[b, t, i, j]:
                            a = exp(alpha[b, h, i, j] - mx)
                            alpha[b, h, i, j] = a
                            tot = tot + a
                    for j in range(M):
                        if mk[b, t, i, j]:
                            a = alpha[b, h, i, j] / tot
                            alpha[b, h, i, j] = a
                            for d in range(D):
                                out[b, h, i, d] = out[b, h, i, d] + a * V[b, h, j, d]
    return out_arr, alpha_arr


def attention_backward(q, k, v, alpha, dout):
    cdef const double[:, :, :, ::1] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef const double[:, :, :, ::1] K = np.ascontiguousarray(k, dtype=np.float64)
    cdef const double[:, :, :, ::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef const double[:, :, :, ::1] A = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef const double[:, :, :, ::1] G = np.ascontiguousarray(dout, dtype=np.float64)
    cdef Py_ssize_t B = Q.shape[0], H = Q.shape[1], M = Q.shape[2], D = Q.shape[3]
    dq_arr = np.zeros((B, H, M, D))
    dk_arr = np.zeros((B, H, M, D))
    dv_arr = np.zeros((B, H, M, D))
    da_arr = np.zeros(M)
    cdef double[:, :, :, ::1] dq = dq_arr
    cdef double[:, :, :, ::1] dk = dk_arr
    cdef double[:, :, :, ::1] dv = dv_arr
    cdef double[::1] da = da_arr
    cdef double scale = 1.0 / sqrt(<double>D)
    cdef Py_ssize_t b, h, i, j, d
    cdef double s, dot, a, ds
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(M):
                    dot = 0.0
                    for j in range(M):
                        a = A[b, h, i, j]
                        if a == 0.0:
                            da[j] = 0.0
                            continue
                        s = 0.0
                        for d in range(D):
                            s = s + G[b, h, i, d] * V[b, h, j, d]
                            dv[b, h, j, d] = dv[b, h, j, d] + a * G[b, h, i, d]
                        da[j] = s
                        dot = dot + a * s
                    for j in range(M):
                        a = A[b, h, i, j]
                        if a == 0.0:
                            continue
                        ds = a * (da[j] - dot) * scale
                        for d in range(D):
                            dq[b, h, i, d] = dq[b, h, i, d] + ds * K[b, h, j, d]
                            dk[b, h, j, d] = dk[b, h, j, d] + ds * Q[b, h, i, d]
    return dq_arr, dk_arr, dv_arr
