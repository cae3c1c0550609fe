# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Semantics mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef void _stencil(const double[:, ::1] a, const double[:, ::1] v,
                   double[:, ::1] out, double inv_h2, bint masked) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j, ip, im, jp, jm
    cdef double c, s, vij, aij
    for i in range(n):
        ip = i + 1 if i + 1 < n else 0
        im = i - 1 if i > 0 else n - 1
        for j in range(n):
            if masked and (i == 0 or j == 0):
                out[i, j] = 0.0
                continue
            jp = j + 1 if j + 1 < n else 0
            jm = j - 1 if j > 0 else n - 1
            aij = a[i, j]
            vij = v[i, j]
            s = 0.5 * (aij + a[ip, j]) * (vij - v[ip, j])
            s = s + 0.5 * (aij + a[im, j]) * (vij - v[im, j])
            s = s + 0.5 * (aij + a[i, jp]) * (vij - v[i, jp])
            s = s + 0.5 * (aij + a[i, jm]) * (vij - v[i, jm])
            out[i, j] = s * inv_h2


def darcy_stencil(a, v, double inv_h2):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    out = np.empty_like(np.asarray(av))
    cdef double[:, ::1] ov = out
    with nogil:
        _stencil(av, vv, ov, inv_h2, False)
    return out


def darcy_diagonal(a, double inv_h2):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0]
    out = np.empty((n, n))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(n):
                ov[i, j] = inv_h2 * (2.0 * av[i, j] + 0.5 * (
                    av[i + 1 if i + 1 < n else 0, j] + av[i - 1 if i > 0 else n - 1, j]
                    + av[i, j + 1 if j + 1 < n else 0] + av[i, j - 1 if j > 0 else n - 1]))
    return out


def darcy_pcg(a, b, double inv_h2, double tol, int maxiter):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0]
    u_arr = np.zeros((n, n))
    r_arr = np.array(b, dtype=np.float64, order="C", copy=True)
    r_arr[0, :] = 0.0
    r_arr[:, 0] = 0.0
    dinv_arr = np.zeros((n, n))
    d = darcy_diagonal(av, inv_h2)
    dinv_arr[1:, 1:] = 1.0 / d[1:, 1:]
    z_arr = r_arr * dinv_arr
    p_arr = z_arr.copy()
    q_arr = np.zeros((n, n))
    cdef double[:, ::1] u = u_arr
    cdef double[:, ::1] r = r_arr
    cdef double[:, ::1] dinv = dinv_arr
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] q = q_arr
    cdef Py_ssize_t i, j
    cdef double bnorm = 0.0, rz = 0.0, rz_new, pq, alpha, beta, rr, zij
    cdef int it = 0
    with nogil:
        for i in range(n):
            for j in range(n):
                bnorm += r[i, j] * r[i, j]
                rz += r[i, j] * r[i, j] * dinv[i, j]
        bnorm = sqrt(bnorm)
        rr = bnorm
        if bnorm > 0.0:
            while it < maxiter:
                _stencil(av, p, q, inv_h2, True)
                pq = 0.0
                for i in range(n):
                    for j in range(n):
                        pq += p[i, j] * q[i, j]
                alpha = rz / pq
                rr = 0.0
                for i in range(n):
                    for j in range(n):
                        u[i, j] += alpha * p[i, j]
                        r[i, j] -= alpha * q[i, j]
                        rr += r[i, j] * r[i, j]
                it += 1
                rr = sqrt(rr)
                if rr <= tol * bnorm:
                    break
                rz_new = 0.0
                for i in range(n):
                    for j in range(n):
                        rz_new += r[i, j] * r[i, j] * dinv[i, j]
                beta = rz_new / rz
                rz = rz_new
                for i in range(n):
                    for j in range(n):
                        p[i, j] = r[i, j] * dinv[i, j] + beta * p[i, j]
    if bnorm == 0.0:
        return u_arr, 0, 0.0
    return u_arr, it, rr / bnorm
