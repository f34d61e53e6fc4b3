# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: nearest-point projection onto unions of simplicial cones.

Each cone is described by the list of its generator subsets.  For every
subset ``S`` we store the pseudo-inverse rows ``A_S`` (coefficients of the
least-squares fit onto ``span(S)``) and the generator rows ``G_S``.  The
nearest point of a simplicial cone is the least-squares fit onto the face
whose coefficients are all nonnegative and whose residual is smallest, so a
full enumeration of faces is exact.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def project_union(double[:, ::1] pts, double[:, ::1] A, double[:, ::1] G,
                  long[::1] sub_off, long[::1] cone_of_sub, double tol):
    """Project each row of ``pts`` onto the union of the packed cones.

    Returns ``(q, d2, which)``: nearest points, squared distances and the
    index of the winning cone (first cone wins ties).
    """
    cdef Py_ssize_t M = pts.shape[0]
    cdef Py_ssize_t N = pts.shape[1]
    cdef Py_ssize_t nsub = sub_off.shape[0] - 1
    cdef Py_ssize_t i, s, a, b, j, c, kk
    cdef double coef, d2, best, diff
    cdef bint feasible
    q_arr = np.zeros((M, N), dtype=np.float64)
    d2_arr = np.empty(M, dtype=np.float64)
    w_arr = np.zeros(M, dtype=np.int64)
    cdef double[:, ::1] q = q_arr
    cdef double[::1] dd = d2_arr
    cdef long[::1] which = w_arr
    cdef double[64] coefs
    cdef double[16] cand
    cdef double[16] bestq
    if N > 16:
        raise ValueError("ambient dimension above 16 is not supported")
    for i in range(M):
        best = 1e300
        for c in range(N):
            bestq[c] = 0.0
        for s in range(nsub):
            a = sub_off[s]
            b = sub_off[s + 1]
            if b - a > 64:
                raise ValueError("face with more than 64 generators")
            feasible = True
            for j in range(a, b):
                coef = 0.0
                for c in range(N):
                    coef = coef + A[j, c] * pts[i, c]
                if coef < -tol:
                    feasible = False
                    break
                coefs[j - a] = coef if coef > 0.0 else 0.0
            if not feasible:
                continue
            d2 = 0.0
            for c in range(N):
                cand[c] = 0.0
            for j in range(a, b):
                for c in range(N):
                    cand[c] = cand[c] + coefs[j - a] * G[j, c]
            for c in range(N):
                diff = pts[i, c] - cand[c]
                d2 = d2 + diff * diff
            if d2 < best:
                best = d2
                which[i] = cone_of_sub[s]
                for c in range(N):
                    bestq[c] = cand[c]
        dd[i] = best
        for c in range(N):
            q[i, c] = bestq[c]
    return q_arr, d2_arr, w_arr
