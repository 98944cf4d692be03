"""Numpy implementations of the compiled kernels in ``_kernels.pyx``.

Used when the extension is not built, or when ``POROUS_CITY_PURE=1``.
"""
from __future__ import annotations

import math

import numpy as np

BACKEND = "python"


def _row_ids(indptr):
    return np.repeat(np.arange(len(indptr) - 1, dtype=np.int64), np.diff(indptr))


def csr_matvec(indptr, indices, data, x, out):
    n = out.shape[0]
    prod = np.asarray(data) * np.asarray(x)[np.asarray(indices)]
    out[:] = np.bincount(_row_ids(np.asarray(indptr)), weights=prod, minlength=n)


def scatter_add(slots, values, size):
    # bincount sums in input order, matching the compiled loop bit for bit
    return np.bincount(np.asarray(slots), weights=np.asarray(values, dtype=np.float64),
                       minlength=size).astype(np.float64, copy=False)


def pcg(indptr, indices, data, b, x, dinv, tol, max_iter):
    n = b.shape[0]
    q = np.empty(n)
    csr_matvec(indptr, indices, data, x, q)
    r = b - q
    rnorm = math.sqrt(r @ r)
    if rnorm <= tol:
        return 0, rnorm, 0
    z = dinv * r
    p = z.copy()
    rz = r @ z
    status = 1
    it = 0
    while it < max_iter:
        it += 1
        csr_matvec(indptr, indices, data, p, q)
        pq = p @ q
        if pq == 0.0 or rz == 0.0:
            status = 2
            break
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        rnorm = math.sqrt(r @ r)
        if rnorm <= tol:
            status = 0
            break
        z = dinv * r
        rz_new = r @ z
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    return it, rnorm, status


def bicgstab(indptr, indices, data, b, x, dinv, tol, max_iter):
    n = b.shape[0]
    t = np.empty(n)
    csr_matvec(indptr, indices, data, x, t)
    r = b - t
    rhat = r.copy()
    rnorm = math.sqrt(r @ r)
    if rnorm <= tol:
        return 0, rnorm, 0
    p = np.zeros(n)
    v = np.zeros(n)
    rho_old = alpha = omega = 1.0
    status = 1
    it = 0
    while it < max_iter:
        it += 1
        rho = rhat @ r
        if rho == 0.0:
            status = 2
            break
        beta = (rho / rho_old) * (alpha / omega)
        p = r + beta * (p - omega * v)
        phat = dinv * p
        csr_matvec(indptr, indices, data, phat, v)
        denom = rhat @ v
        if denom == 0.0:
            status = 2
            break
        alpha = rho / denom
        s = r - alpha * v
        snorm = math.sqrt(s @ s)
        if snorm <= tol:
            x += alpha * phat
            rnorm = snorm
            status = 0
            break
        shat = dinv * s
        csr_matvec(indptr, indices, data, shat, t)
        tt = t @ t
        if tt == 0.0:
            status = 2
            break
        omega = (t @ s) / tt
        x += alpha * phat + omega * shat
        r = s - omega * t
        rnorm = math.sqrt(r @ r)
        if rnorm <= tol:
            status = 0
            break
        if omega == 0.0:
            status = 2
            break
        rho_old = rho
    return it, rnorm, status
