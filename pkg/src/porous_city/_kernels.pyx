# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: CSR products, ordered scatter-add, Krylov solvers.

Every routine mirrors one in ``_kernels_py`` operation for operation, so
both backends agree to rounding (and bit-for-bit for the scatter-add).
Status codes returned by the solvers: 0 converged, 1 iteration cap,
2 breakdown.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

ctypedef cnp.int64_t idx_t

BACKEND = "cython"


cdef inline double _dot(const double[::1] a, const double[::1] b, Py_ssize_t n) nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        s += a[i] * b[i]
    return s


cdef inline void _matvec(const idx_t[::1] indptr, const idx_t[::1] indices,
                         const double[::1] data, const double[::1] x,
                         double[::1] out, Py_ssize_t n) nogil:
    cdef Py_ssize_t i
    cdef idx_t k
    cdef double s
    for i in range(n):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * x[indices[k]]
        out[i] = s


def csr_matvec(const idx_t[::1] indptr, const idx_t[::1] indices,
               const double[::1] data, const double[::1] x, double[::1] out):
    _matvec(indptr, indices, data, x, out, out.shape[0])


def scatter_add(const idx_t[::1] slots, const double[::1] values, Py_ssize_t size):
    """Accumulate ``values`` into ``size`` bins in input order."""
    out = np.zeros(size, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t k
    for k in range(slots.shape[0]):
        o[slots[k]] += values[k]
    return out


def pcg(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] data,
        const double[::1] b, double[::1] x, const double[::1] dinv,
        double tol, Py_ssize_t max_iter):
    """Jacobi-preconditioned conjugate gradients, in place on ``x``.

    Stops when the recursive residual 2-norm drops to ``tol`` (absolute).
    Returns ``(iterations, residual_norm, status)``.
    """
    cdef Py_ssize_t n = b.shape[0]
    cdef double[::1] r = np.empty(n)
    cdef double[::1] z = np.empty(n)
    cdef double[::1] p = np.empty(n)
    cdef double[::1] q = np.empty(n)
    cdef Py_ssize_t i, it = 0
    cdef double rz, rz_new, pq, alpha, beta, rnorm
    cdef int status = 1

    _matvec(indptr, indices, data, x, q, n)
    for i in range(n):
        r[i] = b[i] - q[i]
        z[i] = dinv[i] * r[i]
        p[i] = z[i]
    rnorm = sqrt(_dot(r, r, n))
    if rnorm <= tol:
        return 0, rnorm, 0
    rz = _dot(r, z, n)
    while it < max_iter:
        it += 1
        _matvec(indptr, indices, data, p, q, n)
        pq = _dot(p, q, n)
        if pq == 0.0 or rz == 0.0:
            status = 2
            break
        alpha = rz / pq
        for i in range(n):
            x[i] += alpha * p[i]
            r[i] -= alpha * q[i]
        rnorm = sqrt(_dot(r, r, n))
        if rnorm <= tol:
            status = 0
            break
        for i in range(n):
            z[i] = dinv[i] * r[i]
        rz_new = _dot(r, z, n)
        beta = rz_new / rz
        rz = rz_new
        for i in range(n):
            p[i] = z[i] + beta * p[i]
    return it, rnorm, status


def bicgstab(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] data,
             const double[::1] b, double[::1] x, const double[::1] dinv,
             double tol, Py_ssize_t max_iter):
    """Right Jacobi-preconditioned BiCGStab, in place on ``x``.

    Returns ``(iterations, residual_norm, status)``.
    """
    cdef Py_ssize_t n = b.shape[0]
    cdef double[::1] r = np.empty(n)
    cdef double[::1] rhat = np.empty(n)
    cdef double[::1] p = np.zeros(n)
    cdef double[::1] v = np.zeros(n)
    cdef double[::1] phat = np.empty(n)
    cdef double[::1] s = np.empty(n)
    cdef double[::1] shat = np.empty(n)
    cdef double[::1] t = np.empty(n)
    cdef Py_ssize_t i, it = 0
    cdef double rho = 1.0, rho_old = 1.0, alpha = 1.0, omega = 1.0
    cdef double beta, denom, tt, rnorm, snorm
    cdef int status = 1

    _matvec(indptr, indices, data, x, t, n)
    for i in range(n):
        r[i] = b[i] - t[i]
        rhat[i] = r[i]
    rnorm = sqrt(_dot(r, r, n))
    if rnorm <= tol:
        return 0, rnorm, 0
    while it < max_iter:
        it += 1
        rho = _dot(rhat, r, n)
        if rho == 0.0:
            status = 2
            break
        beta = (rho / rho_old) * (alpha / omega)
        for i in range(n):
            p[i] = r[i] + beta * (p[i] - omega * v[i])
            phat[i] = dinv[i] * p[i]
        _matvec(indptr, indices, data, phat, v, n)
        denom = _dot(rhat, v, n)
        if denom == 0.0:
            status = 2
            break
        alpha = rho / denom
        for i in range(n):
            s[i] = r[i] - alpha * v[i]
        snorm = sqrt(_dot(s, s, n))
        if snorm <= tol:
            for i in range(n):
                x[i] += alpha * phat[i]
            rnorm = snorm
            status = 0
            break
        for i in range(n):
            shat[i] = dinv[i] * s[i]
        _matvec(indptr, indices, data, shat, t, n)
        tt = _dot(t, t, n)
        if tt == 0.0:
            status = 2
            break
        omega = _dot(t, s, n) / tt
        for i in range(n):
            x[i] += alpha * phat[i] + omega * shat[i]
            r[i] = s[i] - omega * t[i]
        rnorm = sqrt(_dot(r, r, n))
        if rnorm <= tol:
            status = 0
            break
        if omega == 0.0:
            status = 2
            break
        rho_old = rho
    return it, rnorm, status
