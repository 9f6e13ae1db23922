"""Pure-numpy versions of the hot kernels.

These are the reference implementations; the Cython module ``_ckernels``
mirrors every function here with the same signature and output layout.
"""

import numpy as np


def bspline_basis(x, lo, h, intervals, degree):
    """Evaluate all uniform B-spline basis functions and their derivatives.

    ``x`` is a flat float64 array.  The knot vector is ``lo + h * i`` for
    ``i = -degree .. intervals + degree``.  Returns ``(values, derivs)``,
    both of shape ``(len(x), intervals + degree)``.
    """
    x = np.asarray(x, dtype=np.float64)
    k = degree
    n_knots = intervals + 2 * k + 1
    t = lo + h * np.arange(-k, intervals + k + 1, dtype=np.float64)
    xs = x[:, None]
    b = ((xs >= t[:-1]) & (xs < t[1:])).astype(np.float64)
    # the right end of the grid belongs to the last interior interval
    at_hi = x == t[intervals + k]
    if at_hi.any():
        b[at_hi] = 0.0
        b[at_hi, intervals + k - 1] = 1.0
    prev = b
    for d in range(1, k + 1):
        prev = b
        left = (xs - t[: n_knots - 1 - d]) / (t[d : n_knots - 1] - t[: n_knots - 1 - d])
        right = (t[d + 1 :] - xs) / (t[d + 1 :] - t[1 : n_knots - d])
        b = left * prev[:, :-1] + right * prev[:, 1:]
    if k == 0:
        return b, np.zeros_like(b)
    n_basis = intervals + k
    j = np.arange(n_basis)
    dl = k / (t[j + k] - t[j])
    dr = k / (t[j + k + 1] - t[j + 1])
    db = prev[:, :n_basis] * dl - prev[:, 1 : n_basis + 1] * dr
    return b, db


def scan_forward(u, delta, A, B, C, D):
    """Selective scan recurrence.

    u, delta: (N, L, E); A: (E, S); B, C: (N, L, S); D: (E,).
    Returns y (N, L, E) and the states h (N, L, E, S) after every step.
    """
    N, L, E = u.shape
    S = A.shape[1]
    hs = np.empty((N, L, E, S), dtype=u.dtype)
    y = np.empty_like(u)
    h = np.zeros((N, E, S), dtype=u.dtype)
    for t in range(L):
        dt = delta[:, t, :, None]
        h = np.exp(dt * A) * h + dt * B[:, t, None, :] * u[:, t, :, None]
        hs[:, t] = h
        y[:, t] = np.einsum("nes,ns->ne", h, C[:, t]) + D * u[:, t]
    return y, hs


def scan_backward(gy, u, delta, A, B, C, D, hs):
    """Adjoint of :func:`scan_forward`; returns grads for (u, delta, A, B, C, D)."""
    N, L, E = u.shape
    S = A.shape[1]
    du = np.empty_like(u)
    ddelta = np.empty_like(delta)
    dA = np.zeros_like(A)
    dB = np.empty_like(B)
    dC = np.einsum("nte,ntes->nts", gy, hs)
    dD = np.einsum("nte,nte->e", gy, u)
    gh = np.zeros((N, E, S), dtype=u.dtype)
    zero = np.zeros((N, E, S), dtype=u.dtype)
    for t in range(L - 1, -1, -1):
        gh = gh + gy[:, t, :, None] * C[:, t, None, :]
        dt = delta[:, t, :, None]
        decay = np.exp(dt * A)
        h_prev = hs[:, t - 1] if t > 0 else zero
        ut = u[:, t, :, None]
        bt = B[:, t, None, :]
        du[:, t] = gy[:, t] * D + np.sum(gh * dt * bt, axis=2)
        ddelta[:, t] = np.sum(gh * (A * decay * h_prev + bt * ut), axis=2)
        dA += np.sum(gh * dt * decay * h_prev, axis=0)
        dB[:, t] = np.sum(gh * dt * ut, axis=1)
        gh = gh * decay
    return du, ddelta, dA, dB, dC, dD
