# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels: float32 in/out, float64 accumulators."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def conv1d_forward(const float[:, :, ::1] x, const float[:, :, ::1] w):
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1], length = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t lout = length - k + 1
    out_arr = np.empty((b, cout, lout), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t ib, io, ii, it, ik
    cdef double acc
    for ib in range(b):
        for io in range(cout):
            for it in range(lout):
                acc = 0.0
                for ii in range(cin):
                    for ik in range(k):
                        acc += <double> x[ib, ii, it + ik] * <double> w[io, ii, ik]
                out[ib, io, it] = <float> acc
    return out_arr


def conv1d_grad_input(const float[:, :, ::1] gout, const float[:, :, ::1] w, Py_ssize_t length):
    cdef Py_ssize_t b = gout.shape[0], cout = gout.shape[1], lout = gout.shape[2]
    cdef Py_ssize_t cin = w.shape[1], k = w.shape[2]
    gx_arr = np.zeros((b, cin, length), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t ib, io, ii, it, ik
    cdef double g
    for ib in range(b):
        for io in range(cout):
            for it in range(lout):
                g = <double> gout[ib, io, it]
                for ii in range(cin):
                    for ik in range(k):
                        gx[ib, ii, it + ik] += g * <double> w[io, ii, ik]
    return gx_arr.astype(np.float32)


def conv1d_grad_weight(const float[:, :, ::1] gout, const float[:, :, ::1] x, Py_ssize_t kernel):
    cdef Py_ssize_t b = gout.shape[0], cout = gout.shape[1], lout = gout.shape[2]
    cdef Py_ssize_t cin = x.shape[1]
    gw_arr = np.zeros((cout, cin, kernel), dtype=np.float64)
    cdef double[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t ib, io, ii, it, ik
    cdef double g
    for ib in range(b):
        for io in range(cout):
            for it in range(lout):
                g = <double> gout[ib, io, it]
                for ii in range(cin):
                    for ik in range(kernel):
                        gw[io, ii, ik] += g * <double> x[ib, ii, it + ik]
    return gw_arr.astype(np.float32)
