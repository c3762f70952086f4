"""Compiled loss and gradient for the analytic erf kernel.

Gradient flow spends nearly all of its time evaluating the vector field on
tiny matrices, where numpy call overhead dominates. This is the same
computation as :func:`tslab.population_loss.loss_and_gradient` written as
plain loops for numba. If numba is missing, ``AVAILABLE`` is False and
callers fall back to the numpy path.
"""
from __future__ import annotations

import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

AVAILABLE = numba is not None

_TWO_OVER_PI = 2.0 / math.pi
_GUARD = 1e-15


def _erf_terms(r1, r2, u):
    s1 = 1.0 + r1 * r1
    s2 = 1.0 + r2 * r2
    scale = 1.0 / math.sqrt(s1 * s2)
    a = r1 * r2 * u * scale
    if a > 1.0 - _GUARD:
        a = 1.0 - _GUARD
    elif a < -1.0 + _GUARD:
        a = -1.0 + _GUARD
    inv = 1.0 / math.sqrt(max(1.0 - a * a, _GUARD))
    val = _TWO_OVER_PI * math.asin(a)
    d_r = _TWO_OVER_PI * (r2 * u / math.sqrt(s2)) * s1 ** -1.5 * inv
    d_u = _TWO_OVER_PI * r1 * r2 * scale * inv
    return val, d_r, d_u


def _clip1(x):
    return min(1.0, max(-1.0, x))


def _erf_field(theta, n, d, Vn, vn, b, const):
    """Return ``(loss, grad, zero_index)``; ``zero_index`` is -1 unless a
    student neuron has zero norm, in which case the other outputs are junk."""
    k = Vn.shape[1]
    stride = d + 1
    grad = np.zeros(theta.size)
    Wn = np.empty((n, d))
    r = np.empty(n)
    a = np.empty(n)
    for i in range(n):
        base = i * stride
        s = 0.0
        for p in range(d):
            s += theta[base + p] ** 2
        r[i] = math.sqrt(s)
        a[i] = theta[base + d]
        if r[i] == 0.0:
            return math.nan, grad, i
        for p in range(d):
            Wn[i, p] = theta[base + p] / r[i]

    value = const
    for i in range(n):
        radial = 0.0
        ga = 0.0
        proj = 0.0
        tang = np.zeros(d)
        for j in range(n):
            rho = 1.0
            if j != i:
                rho = 0.0
                for p in range(d):
                    rho += Wn[i, p] * Wn[j, p]
                rho = _clip1(rho)
            gv, dr, du = _erf_terms(r[i], r[j], rho)
            value += a[i] * a[j] * gv
            ga += 2.0 * gv * a[j]
            radial += 2.0 * a[i] * a[j] * dr
            if j != i:
                c = 2.0 * a[i] * a[j] * du
                proj += c * rho
                for p in range(d):
                    tang[p] += c * Wn[j, p]
        for j in range(k):
            u = 0.0
            for p in range(d):
                u += Wn[i, p] * Vn[p, j]
            u = _clip1(u)
            gv, dr, du = _erf_terms(r[i], vn[j], u)
            value -= 2.0 * a[i] * b[j] * gv
            ga -= 2.0 * gv * b[j]
            radial -= 2.0 * a[i] * b[j] * dr
            c = -2.0 * a[i] * b[j] * du
            proj += c * u
            for p in range(d):
                tang[p] += c * Vn[p, j]
        base = i * stride
        for p in range(d):
            grad[base + p] = Wn[i, p] * radial + (tang[p] - Wn[i, p] * proj) / r[i]
        grad[base + d] = ga
    return value, grad, -1


if AVAILABLE:
    _jit = numba.njit(cache=True, fastmath=False)
    _erf_terms = _jit(_erf_terms)
    _clip1 = _jit(_clip1)
    erf_field = _jit(_erf_field)
else:  # pragma: no cover
    erf_field = None
