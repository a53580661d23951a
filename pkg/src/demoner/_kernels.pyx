# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled linear-chain CRF kernels; same contract as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


cdef inline double _lse_pair(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log(1.0 + exp(b - a))
    return b + log(1.0 + exp(a - b))


cdef void _forward(const double[:, :] em, const double[:, :] tr, double[:, :] alpha) nogil:
    cdef Py_ssize_t n = em.shape[0], T = em.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double m, s, v
    for j in range(T):
        alpha[0, j] = tr[T, j] + em[0, j]
    for i in range(1, n):
        for j in range(T):
            m = -INFINITY
            for k in range(T):
                v = alpha[i - 1, k] + tr[k, j]
                if v > m:
                    m = v
            s = 0.0
            if m != -INFINITY:
                for k in range(T):
                    s += exp(alpha[i - 1, k] + tr[k, j] - m)
                alpha[i, j] = m + log(s) + em[i, j]
            else:
                alpha[i, j] = -INFINITY


cdef void _backward(const double[:, :] em, const double[:, :] tr, double[:, :] beta) nogil:
    cdef Py_ssize_t n = em.shape[0], T = em.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double m, s, v
    for j in range(T):
        beta[n - 1, j] = tr[j, T + 1]
    for i in range(n - 2, -1, -1):
        for j in range(T):
            m = -INFINITY
            for k in range(T):
                v = tr[j, k] + em[i + 1, k] + beta[i + 1, k]
                if v > m:
                    m = v
            s = 0.0
            if m != -INFINITY:
                for k in range(T):
                    s += exp(tr[j, k] + em[i + 1, k] + beta[i + 1, k] - m)
                beta[i, j] = m + log(s)
            else:
                beta[i, j] = -INFINITY


cdef double _final(const double[:, :] alpha, const double[:, :] tr, Py_ssize_t n, Py_ssize_t T) nogil:
    cdef double m = -INFINITY, s = 0.0, v
    cdef Py_ssize_t j
    for j in range(T):
        v = alpha[n - 1, j] + tr[j, T + 1]
        if v > m:
            m = v
    if m == -INFINITY:
        return m
    for j in range(T):
        s += exp(alpha[n - 1, j] + tr[j, T + 1] - m)
    return m + log(s)


def forward(emissions, transitions):
    cdef const double[:, :] em = np.ascontiguousarray(emissions, dtype=np.float64)
    cdef const double[:, :] tr = np.ascontiguousarray(transitions, dtype=np.float64)
    cdef Py_ssize_t n = em.shape[0], T = em.shape[1]
    alpha_arr = np.empty((n, T))
    cdef double[:, :] alpha = alpha_arr
    cdef double log_z
    with nogil:
        _forward(em, tr, alpha)
        log_z = _final(alpha, tr, n, T)
    return alpha_arr, float(log_z)


def backward(emissions, transitions):
    cdef const double[:, :] em = np.ascontiguousarray(emissions, dtype=np.float64)
    cdef const double[:, :] tr = np.ascontiguousarray(transitions, dtype=np.float64)
    beta_arr = np.empty((em.shape[0], em.shape[1]))
    cdef double[:, :] beta = beta_arr
    with nogil:
        _backward(em, tr, beta)
    return beta_arr


def expectations(emissions, transitions):
    cdef const double[:, :] em = np.ascontiguousarray(emissions, dtype=np.float64)
    cdef const double[:, :] tr = np.ascontiguousarray(transitions, dtype=np.float64)
    cdef Py_ssize_t n = em.shape[0], T = em.shape[1]
    cdef Py_ssize_t i, j, k
    alpha_arr = np.empty((n, T))
    beta_arr = np.empty((n, T))
    node_arr = np.empty((n, T))
    counts_arr = np.zeros((T + 2, T + 2))
    cdef double[:, :] alpha = alpha_arr
    cdef double[:, :] beta = beta_arr
    cdef double[:, :] node = node_arr
    cdef double[:, :] counts = counts_arr
    cdef double log_z
    with nogil:
        _forward(em, tr, alpha)
        _backward(em, tr, beta)
        log_z = _final(alpha, tr, n, T)
        for i in range(n):
            for j in range(T):
                node[i, j] = exp(alpha[i, j] + beta[i, j] - log_z)
        for j in range(T):
            counts[T, j] = node[0, j]
            counts[j, T + 1] = node[n - 1, j]
        for i in range(n - 1):
            for j in range(T):
                for k in range(T):
                    counts[j, k] += exp(alpha[i, j] + tr[j, k] + em[i + 1, k] + beta[i + 1, k] - log_z)
    return float(log_z), node_arr, counts_arr


def viterbi(emissions, transitions):
    cdef const double[:, :] em = np.ascontiguousarray(emissions, dtype=np.float64)
    cdef const double[:, :] tr = np.ascontiguousarray(transitions, dtype=np.float64)
    cdef Py_ssize_t n = em.shape[0], T = em.shape[1]
    cdef Py_ssize_t i, j, k, arg
    cdef double best, v
    back_arr = np.zeros((n, T), dtype=np.int64)
    path_arr = np.empty(n, dtype=np.int64)
    cdef long long[:, :] back = back_arr
    cdef long long[:] path = path_arr
    cdef double[:] delta = np.empty(T)
    cdef double[:] nxt = np.empty(T)
    with nogil:
        for j in range(T):
            delta[j] = tr[T, j] + em[0, j]
        for i in range(1, n):
            for j in range(T):
                arg = 0
                best = delta[0] + tr[0, j]
                for k in range(1, T):
                    v = delta[k] + tr[k, j]
                    if v > best:
                        best = v
                        arg = k
                back[i, j] = arg
                nxt[j] = best + em[i, j]
            for j in range(T):
                delta[j] = nxt[j]
        arg = 0
        best = delta[0] + tr[0, T + 1]
        for j in range(1, T):
            v = delta[j] + tr[j, T + 1]
            if v > best:
                best = v
                arg = j
        path[n - 1] = arg
        for i in range(n - 1, 0, -1):
            path[i - 1] = back[i, path[i]]
    return path_arr, float(best)
