# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective-scan recurrence, forward and reverse mode.

Same contract as ``_scan_py``; float64 only.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def scan_forward(double[:, :, ::1] x, double[:, :, ::1] delta,
                 double[:, ::1] A, double[:, :, ::1] B, double[:, :, ::1] C):
    cdef Py_ssize_t n = x.shape[0], length = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t s = A.shape[1]
    cdef Py_ssize_t b, t, i, k
    cdef double dt, u, acc, h

    hs_arr = np.zeros((n, length, d, s))
    y_arr = np.empty((n, length, d))
    cdef double[:, :, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] y = y_arr

    with nogil:
        for b in range(n):
            for t in range(length):
                for i in range(d):
                    dt = delta[b, t, i]
                    u = dt * x[b, t, i]
                    acc = 0.0
                    for k in range(s):
                        if t > 0:
                            h = exp(dt * A[i, k]) * hs[b, t - 1, i, k] + u * B[b, t, k]
                        else:
                            h = u * B[b, t, k]
                        hs[b, t, i, k] = h
                        acc = acc + C[b, t, k] * h
                    y[b, t, i] = acc
    return y_arr, hs_arr


def scan_backward(double[:, :, ::1] gy, double[:, :, ::1] x, double[:, :, ::1] delta,
                  double[:, ::1] A, double[:, :, ::1] B, double[:, :, ::1] C,
                  double[:, :, :, ::1] hs):
    cdef Py_ssize_t n = x.shape[0], length = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t s = A.shape[1]
    cdef Py_ssize_t b, t, i, k
    cdef double dt, xt, g, decay, h_prev, g_arg, ghb, gd

    gx_arr = np.empty((n, length, d))
    gdelta_arr = np.empty((n, length, d))
    gA_arr = np.zeros((d, s))
    gB_arr = np.zeros((n, length, s))
    gC_arr = np.zeros((n, length, s))
    gh_arr = np.zeros((d, s))
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gdelta = gdelta_arr
    cdef double[:, ::1] gA = gA_arr
    cdef double[:, :, ::1] gB = gB_arr
    cdef double[:, :, ::1] gC = gC_arr
    cdef double[:, ::1] gh = gh_arr

    with nogil:
        for b in range(n):
            for i in range(d):
                for k in range(s):
                    gh[i, k] = 0.0
            for t in range(length - 1, -1, -1):
                for i in range(d):
                    dt = delta[b, t, i]
                    xt = x[b, t, i]
                    ghb = 0.0
                    gd = 0.0
                    for k in range(s):
                        g = gh[i, k] + gy[b, t, i] * C[b, t, k]
                        gC[b, t, k] += gy[b, t, i] * hs[b, t, i, k]
                        gB[b, t, k] += g * dt * xt
                        ghb = ghb + g * B[b, t, k]
                        if t > 0:
                            decay = exp(dt * A[i, k])
                            h_prev = hs[b, t - 1, i, k]
                            g_arg = g * h_prev * decay
                            gd = gd + g_arg * A[i, k]
                            gA[i, k] += g_arg * dt
                            gh[i, k] = g * decay
                        else:
                            gh[i, k] = 0.0
                    gdelta[b, t, i] = gd + ghb * xt
                    gx[b, t, i] = ghb * dt
    return gx_arr, gdelta_arr, gA_arr, gB_arr, gC_arr
