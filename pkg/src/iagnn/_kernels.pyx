# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment kernels used by the message-passing primitives."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def scatter_add_rows(const double[:, ::1] src, const cnp.int64_t[::1] index, Py_ssize_t n_rows):
    cdef Py_ssize_t n = src.shape[0], d = src.shape[1], i, j, r
    out = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            r = index[i]
            for j in range(d):
                o[r, j] += src[i, j]
    return out


def segment_max(const double[::1] values, const cnp.int64_t[::1] segment, Py_ssize_t n_segments):
    cdef Py_ssize_t n = values.shape[0], i, s
    out = np.full(n_segments, -np.inf, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            s = segment[i]
            if values[i] > o[s]:
                o[s] = values[i]
    return out


def segment_softmax(const double[::1] values, const cnp.int64_t[::1] segment, Py_ssize_t n_segments):
    cdef Py_ssize_t n = values.shape[0], i, s
    mx = np.full(n_segments, -INFINITY, dtype=np.float64)
    tot = np.zeros(n_segments, dtype=np.float64)
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] m = mx, t = tot, o = out
    with nogil:
        for i in range(n):
            s = segment[i]
            if values[i] > m[s]:
                m[s] = values[i]
        for i in range(n):
            s = segment[i]
            o[i] = exp(values[i] - m[s])
            t[s] += o[i]
        for i in range(n):
            o[i] /= t[segment[i]]
    return out


def segment_softmax_backward(const double[::1] prob, const double[::1] grad,
                             const cnp.int64_t[::1] segment, Py_ssize_t n_segments):
    cdef Py_ssize_t n = prob.shape[0], i
    dots = np.zeros(n_segments, dtype=np.float64)
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] dt = dots, o = out
    with nogil:
        for i in range(n):
            dt[segment[i]] += prob[i] * grad[i]
        for i in range(n):
            o[i] = prob[i] * (grad[i] - dt[segment[i]])
    return out


def scatter_add_rows_into(double[:, ::1] out, const double[:, ::1] src, const cnp.int64_t[::1] index):
    cdef Py_ssize_t n = src.shape[0], d = src.shape[1], i, j, r
    with nogil:
        for i in range(n):
            r = index[i]
            for j in range(d):
                out[r, j] += src[i, j]
