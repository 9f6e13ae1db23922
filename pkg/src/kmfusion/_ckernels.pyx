# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_fallback``; same signatures."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline double _knot(double lo, double h, int k, int i) nogil:
    return lo + h * <double>(i - k)


def bspline_basis(x, double lo, double h, int intervals, int degree):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t m = xv.shape[0]
    cdef int k = degree
    cdef int n_basis = intervals + k
    cdef int n_knots = intervals + 2 * k + 1
    out = np.zeros((m, n_basis), dtype=np.float64)
    dout = np.zeros((m, n_basis), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] dv = dout
    # nk holds the k+1 nonzero values on one knot span
    cdef double[::1] nk = np.zeros(k + 2, dtype=np.float64)
    cdef double[::1] nprev = np.zeros(k + 2, dtype=np.float64)
    cdef Py_ssize_t i
    cdef int span, d, r, j
    cdef double xi, saved, temp, denom
    cdef double t_first = _knot(lo, h, k, 0)
    cdef double t_last = _knot(lo, h, k, n_knots - 1)
    cdef double t_hi = _knot(lo, h, k, intervals + k)
    for i in range(m):
        xi = xv[i]
        if xi < t_first or xi >= t_last and xi != t_hi:
            continue
        if xi == t_hi:
            span = intervals + k - 1
        else:
            span = <int>floor((xi - t_first) / h)
            if span > n_knots - 2:
                span = n_knots - 2
            if span < 0:
                span = 0
            # rounding at knots: settle on t[span] <= x < t[span+1]
            while span > 0 and xi < _knot(lo, h, k, span):
                span -= 1
            while span < n_knots - 2 and xi >= _knot(lo, h, k, span + 1):
                span += 1
        # after degree d, nk[r] is B_{span-d+r, d}
        nk[0] = 1.0
        for d in range(1, k + 1):
            for r in range(d):
                nprev[r] = nk[r]
            saved = 0.0
            for r in range(d):
                # B_{j,d-1} feeds B_{j-1,d} (slot r) and B_{j,d} (slot r+1)
                j = span - d + 1 + r
                temp = nprev[r]
                denom = _knot(lo, h, k, j + d) - _knot(lo, h, k, j)
                nk[r] = saved + temp * (_knot(lo, h, k, j + d) - xi) / denom
                saved = temp * (xi - _knot(lo, h, k, j)) / denom
            nk[d] = saved
        for r in range(k + 1):
            j = span - k + r
            if 0 <= j < n_basis:
                ov[i, j] = nk[r]
        if k > 0:
            # nprev[r] is B_{span-k+1+r, k-1}
            for r in range(k + 1):
                j = span - k + r
                if j < 0 or j >= n_basis:
                    continue
                temp = 0.0
                if r >= 1:
                    temp += k * nprev[r - 1] / (_knot(lo, h, k, j + k) - _knot(lo, h, k, j))
                if r < k:
                    temp -= k * nprev[r] / (_knot(lo, h, k, j + k + 1) - _knot(lo, h, k, j + 1))
                dv[i, j] = temp
    return out, dout


def _scan_forward(real[:, :, ::1] u, real[:, :, ::1] delta, real[:, ::1] A,
                  real[:, :, ::1] B, real[:, :, ::1] C, real[::1] D,
                  real[:, :, ::1] y, real[:, :, :, ::1] hs):
    cdef Py_ssize_t N = u.shape[0], L = u.shape[1], E = u.shape[2], S = A.shape[1]
    cdef Py_ssize_t n, t, e, s
    cdef real dt, ut, acc, hv
    for n in range(N):
        for t in range(L):
            for e in range(E):
                dt = delta[n, t, e]
                ut = u[n, t, e]
                acc = 0
                for s in range(S):
                    if t > 0:
                        hv = exp(dt * A[e, s]) * hs[n, t - 1, e, s] + dt * B[n, t, s] * ut
                    else:
                        hv = dt * B[n, t, s] * ut
                    hs[n, t, e, s] = hv
                    acc = acc + C[n, t, s] * hv
                y[n, t, e] = acc + D[e] * ut


def scan_forward(u, delta, A, B, C, D):
    dtype = u.dtype
    u = np.ascontiguousarray(u)
    delta = np.ascontiguousarray(delta, dtype=dtype)
    A = np.ascontiguousarray(A, dtype=dtype)
    B = np.ascontiguousarray(B, dtype=dtype)
    C = np.ascontiguousarray(C, dtype=dtype)
    D = np.ascontiguousarray(D, dtype=dtype)
    N, L, E = u.shape
    S = A.shape[1]
    y = np.empty((N, L, E), dtype=dtype)
    hs = np.empty((N, L, E, S), dtype=dtype)
    _scan_forward(u, delta, A, B, C, D, y, hs)
    return y, hs


def _scan_backward(real[:, :, ::1] gy, real[:, :, ::1] u, real[:, :, ::1] delta,
                   real[:, ::1] A, real[:, :, ::1] B, real[:, :, ::1] C, real[::1] D,
                   real[:, :, :, ::1] hs, real[:, :, ::1] du, real[:, :, ::1] ddelta,
                   real[:, ::1] dA, real[:, :, ::1] dB, real[:, :, ::1] dC, real[::1] dD,
                   real[:, ::1] gh):
    cdef Py_ssize_t N = u.shape[0], L = u.shape[1], E = u.shape[2], S = A.shape[1]
    cdef Py_ssize_t n, t, e, s
    cdef real dt, ut, g, decay, hp, ghv, acc_u, acc_d
    for n in range(N):
        for e in range(E):
            for s in range(S):
                gh[e, s] = 0
        for t in range(L - 1, -1, -1):
            for e in range(E):
                g = gy[n, t, e]
                dt = delta[n, t, e]
                ut = u[n, t, e]
                dD[e] += g * ut
                acc_u = g * D[e]
                acc_d = 0
                for s in range(S):
                    dC[n, t, s] += g * hs[n, t, e, s]
                    ghv = gh[e, s] + g * C[n, t, s]
                    decay = exp(dt * A[e, s])
                    hp = hs[n, t - 1, e, s] if t > 0 else 0
                    acc_u = acc_u + ghv * dt * B[n, t, s]
                    acc_d = acc_d + ghv * (A[e, s] * decay * hp + B[n, t, s] * ut)
                    dA[e, s] += ghv * dt * decay * hp
                    dB[n, t, s] += ghv * dt * ut
                    gh[e, s] = ghv * decay
                du[n, t, e] = acc_u
                ddelta[n, t, e] = acc_d


def scan_backward(gy, u, delta, A, B, C, D, hs):
    dtype = u.dtype
    gy = np.ascontiguousarray(gy, dtype=dtype)
    u = np.ascontiguousarray(u)
    delta = np.ascontiguousarray(delta, dtype=dtype)
    A = np.ascontiguousarray(A, dtype=dtype)
    B = np.ascontiguousarray(B, dtype=dtype)
    C = np.ascontiguousarray(C, dtype=dtype)
    D = np.ascontiguousarray(D, dtype=dtype)
    hs = np.ascontiguousarray(hs, dtype=dtype)
    N, L, E = u.shape
    S = A.shape[1]
    du = np.empty_like(u)
    ddelta = np.empty_like(u)
    dA = np.zeros((E, S), dtype=dtype)
    dB = np.zeros((N, L, S), dtype=dtype)
    dC = np.zeros((N, L, S), dtype=dtype)
    dD = np.zeros(E, dtype=dtype)
    gh = np.zeros((E, S), dtype=dtype)
    _scan_backward(gy, u, delta, A, B, C, D, hs, du, ddelta, dA, dB, dC, dD, gh)
    return du, ddelta, dA, dB, dC, dD
