# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled greedy residual-selection kernel.

Behavioural twin of :mod:`ctxforge._greedy_py`; :mod:`ctxforge.fusion`
dispatches to whichever is importable.  See the pure version for the
algorithm contract.
"""

from libc.math cimport INFINITY, sqrt

import numpy as np


def greedy_select(b, Py_ssize_t k, double eps=1e-12):
    """Select up to ``k`` rows of factor ``b`` by greedy residual norm.

    Returns ``(indices, gains)`` where ``gains[i]`` is the squared residual
    norm of the row chosen at step ``i``.  Assumes ``1 <= k <= n``; callers
    validate.
    """
    r_arr = np.array(b, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] r = r_arr
    cdef Py_ssize_t n = r.shape[0]
    cdef Py_ssize_t d = r.shape[1]

    n2_arr = np.empty(n, dtype=np.float64)
    used_arr = np.zeros(n, dtype=np.uint8)
    c_arr = np.empty(d, dtype=np.float64)
    gains_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] n2 = n2_arr
    cdef unsigned char[::1] used = used_arr
    cdef double[::1] c = c_arr
    cdef double[::1] gains = gains_arr

    cdef Py_ssize_t i, j, t, best
    cdef Py_ssize_t steps = 0
    cdef double acc, bestval, dot, norm

    for j in range(n):
        acc = 0.0
        for t in range(d):
            acc += r[j, t] * r[j, t]
        n2[j] = acc

    selected = []
    for i in range(k):
        best = -1
        bestval = -INFINITY
        for j in range(n):
            # strict > keeps the smallest index on ties
            if not used[j] and n2[j] > bestval:
                best = j
                bestval = n2[j]
        if bestval < eps:
            break
        norm = sqrt(bestval)
        for t in range(d):
            c[t] = r[best, t] / norm
        used[best] = 1
        selected.append(best)
        gains[steps] = bestval
        steps += 1
        for j in range(n):
            if used[j]:
                continue
            dot = 0.0
            for t in range(d):
                dot += r[j, t] * c[t]
            for t in range(d):
                r[j, t] -= dot * c[t]
            acc = n2[j] - dot * dot
            n2[j] = acc if acc > 0.0 else 0.0

    return selected, gains_arr[:steps].copy()
