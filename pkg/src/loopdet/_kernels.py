"""Compiled inner loops shared by the samplers and the holonomy integrator.

Everything here works on flat, concatenated arrays: a batch of paths is a
``(S, d)`` array of lifted points plus an ``offsets`` array of length
``n_paths + 1`` so that path ``i`` occupies ``points[offsets[i]:offsets[i+1]]``.
"""

import numpy as np
from numba import njit

REPROJECT_EVERY = 1024


@njit(cache=True)
def build_bridges(starts, displacements, scales, normals, offsets, out):
    """Exact Gaussian bridges on uniform grids.

    ``normals`` holds one standard normal vector per step; path ``i`` has
    ``offsets[i+1] - offsets[i] - 1`` steps of standard deviation ``scales[i]``.
    """
    n_paths = starts.shape[0]
    d = starts.shape[1]
    for i in range(n_paths):
        a = offsets[i]
        b = offsets[i + 1]
        n = b - a - 1
        # free walk first, the bridge correction is linear in the step index
        for j in range(d):
            out[a, j] = 0.0
        for k in range(1, n + 1):
            for j in range(d):
                out[a + k, j] = out[a + k - 1, j] + scales[i] * normals[a - i + k - 1, j]
        for j in range(d):
            end = out[b - 1, j]
            for k in range(n + 1):
                frac = k / n
                out[a + k, j] = (starts[i, j] + out[a + k, j]
                                 + frac * (displacements[i, j] - end))
            out[b - 1, j] = starts[i, j] + displacements[i, j]


@njit(cache=True)
def _matmul(a, b, out):
    n = a.shape[0]
    for i in range(n):
        for j in range(n):
            s = 0j
            for k in range(n):
                s += a[i, k] * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _norm1(a):
    n = a.shape[0]
    best = 0.0
    for j in range(n):
        s = 0.0
        for i in range(n):
            s += abs(a[i, j])
        if s > best:
            best = s
    return best


@njit(cache=True)
def expm_small(x, out, work1, work2):
    """Scaling-and-squaring Taylor exponential for tiny dense matrices.

    The series is truncated adaptively once a term drops below 1e-18 in
    1-norm, after scaling so that ``|x| <= 0.5``.
    """
    n = x.shape[0]
    nrm = _norm1(x)
    s = 0
    while nrm > 0.5:
        nrm *= 0.5
        s += 1
    scale = 0.5 ** s
    # work1 holds the current term, out accumulates the sum
    for i in range(n):
        for j in range(n):
            work1[i, j] = 1.0 if i == j else 0.0
            out[i, j] = work1[i, j]
    k = 1
    while k < 40:
        _matmul(work1, x, work2)
        f = scale / k
        for i in range(n):
            for j in range(n):
                work1[i, j] = work2[i, j] * f
                out[i, j] += work1[i, j]
        if _norm1(work1) < 1e-18:
            break
        k += 1
    for _ in range(s):
        _matmul(out, out, work2)
        for i in range(n):
            for j in range(n):
                out[i, j] = work2[i, j]


@njit(cache=True)
def expm2(x00, x01, x10, x11):
    """Closed-form exponential of a 2x2 complex matrix.

    With ``Y = X - (tr X / 2) I`` one has ``Y^2 = -det(Y) I``, so
    ``exp(X) = e^{tr/2} (cosh(s) I + sinh(s)/s Y)`` with ``s^2 = -det Y``.
    """
    half = 0.5 * (x00 + x11)
    y00 = x00 - half
    y11 = x11 - half
    s2 = -(y00 * y11 - x01 * x10)
    s = np.sqrt(s2)
    if abs(s2) < 1e-6:
        c = 1.0 + s2 * (0.5 + s2 * (1.0 / 24.0 + s2 * (1.0 / 720.0 + s2 / 40320.0)))
        sh = 1.0 + s2 * (1.0 / 6.0 + s2 * (1.0 / 120.0 + s2 * (1.0 / 5040.0 + s2 / 362880.0)))
    else:
        c = np.cosh(s)
        sh = np.sinh(s) / s
    e = np.exp(half)
    return e * (c + sh * y00), e * sh * x01, e * sh * x10, e * (c + sh * y11)


@njit(cache=True)
def _polar2(u00, u01, u10, u11):
    for _ in range(2):
        # v = u^* u, u <- u (3 I - v) / 2
        v00 = np.conj(u00) * u00 + np.conj(u10) * u10
        v01 = np.conj(u00) * u01 + np.conj(u10) * u11
        v10 = np.conj(u01) * u00 + np.conj(u11) * u10
        v11 = np.conj(u01) * u01 + np.conj(u11) * u11
        w00, w01, w10, w11 = 3.0 - v00, -v01, -v10, 3.0 - v11
        u00, u01, u10, u11 = (0.5 * (u00 * w00 + u01 * w10), 0.5 * (u00 * w01 + u01 * w11),
                              0.5 * (u10 * w00 + u11 * w10), 0.5 * (u10 * w01 + u11 * w11))
    return u00, u01, u10, u11


@njit(cache=True)
def _transport2(points, offsets, coeffs, out):
    d = coeffs.shape[0]
    for p in range(offsets.shape[0] - 1):
        u00, u01, u10, u11 = 1.0 + 0j, 0j, 0j, 1.0 + 0j
        count = 0
        for k in range(offsets[p], offsets[p + 1] - 1):
            x00, x01, x10, x11 = 0j, 0j, 0j, 0j
            for c in range(d):
                dy = points[k + 1, c] - points[k, c]
                x00 -= coeffs[c, 0, 0] * dy
                x01 -= coeffs[c, 0, 1] * dy
                x10 -= coeffs[c, 1, 0] * dy
                x11 -= coeffs[c, 1, 1] * dy
            e00, e01, e10, e11 = expm2(x00, x01, x10, x11)
            u00, u01, u10, u11 = (e00 * u00 + e01 * u10, e00 * u01 + e01 * u11,
                                  e10 * u00 + e11 * u10, e10 * u01 + e11 * u11)
            count += 1
            if count % REPROJECT_EVERY == 0:
                u00, u01, u10, u11 = _polar2(u00, u01, u10, u11)
        out[p, 0, 0] = u00
        out[p, 0, 1] = u01
        out[p, 1, 0] = u10
        out[p, 1, 1] = u11


@njit(cache=True)
def _product2(generators, offsets, out):
    for p in range(offsets.shape[0] - 1):
        u00, u01, u10, u11 = 1.0 + 0j, 0j, 0j, 1.0 + 0j
        count = 0
        for k in range(offsets[p], offsets[p + 1]):
            g = generators[k]
            e00, e01, e10, e11 = expm2(g[0, 0], g[0, 1], g[1, 0], g[1, 1])
            u00, u01, u10, u11 = (e00 * u00 + e01 * u10, e00 * u01 + e01 * u11,
                                  e10 * u00 + e11 * u10, e10 * u01 + e11 * u11)
            count += 1
            if count % REPROJECT_EVERY == 0:
                u00, u01, u10, u11 = _polar2(u00, u01, u10, u11)
        out[p, 0, 0] = u00
        out[p, 0, 1] = u01
        out[p, 1, 0] = u10
        out[p, 1, 1] = u11


@njit(cache=True)
def _product1(generators, offsets, out):
    for p in range(offsets.shape[0] - 1):
        acc = 0j
        for k in range(offsets[p], offsets[p + 1]):
            acc += generators[k, 0, 0]
        out[p, 0, 0] = np.exp(acc)


@njit(cache=True)
def reproject_unitary(u, work1, work2):
    """Two Newton-Schulz steps towards the polar factor of ``u``."""
    n = u.shape[0]
    for _ in range(2):
        # work1 = u^* u
        for i in range(n):
            for j in range(n):
                s = 0j
                for k in range(n):
                    s += np.conj(u[k, i]) * u[k, j]
                work1[i, j] = -s
            work1[i, i] += 3.0
        _matmul(u, work1, work2)
        for i in range(n):
            for j in range(n):
                u[i, j] = 0.5 * work2[i, j]


@njit(cache=True)
def constant_transport(points, offsets, coeffs, out):
    """Holonomy of ``d + sum_j a_j dx_j`` along each polygonal path.

    ``coeffs`` is ``(d, n, n)``; ``out`` receives ``E_N ... E_1`` per path
    with ``E_k = exp(-sum_j a_j dy_k^j)``.
    """
    d = coeffs.shape[0]
    n = coeffs.shape[1]
    if n == 2:
        _transport2(points, offsets, coeffs, out)
        return
    x = np.empty((n, n), dtype=np.complex128)
    e = np.empty((n, n), dtype=np.complex128)
    u = np.empty((n, n), dtype=np.complex128)
    tmp = np.empty((n, n), dtype=np.complex128)
    w1 = np.empty((n, n), dtype=np.complex128)
    w2 = np.empty((n, n), dtype=np.complex128)
    for p in range(offsets.shape[0] - 1):
        for i in range(n):
            for j in range(n):
                u[i, j] = 1.0 if i == j else 0.0
        count = 0
        for k in range(offsets[p], offsets[p + 1] - 1):
            for i in range(n):
                for j in range(n):
                    acc = 0j
                    for c in range(d):
                        acc -= coeffs[c, i, j] * (points[k + 1, c] - points[k, c])
                    x[i, j] = acc
            expm_small(x, e, w1, w2)
            _matmul(e, u, tmp)
            for i in range(n):
                for j in range(n):
                    u[i, j] = tmp[i, j]
            count += 1
            if count % REPROJECT_EVERY == 0:
                reproject_unitary(u, w1, w2)
        out[p] = u


@njit(cache=True)
def ordered_exp_product(generators, offsets, out):
    """Ordered products ``exp(X_N) ... exp(X_1)`` over segments of ``generators``.

    Segment ``p`` uses ``generators[offsets[p]:offsets[p+1]]``.
    """
    n = generators.shape[1]
    if n == 1:
        # commuting scalars: the ordered product is one exponential
        _product1(generators, offsets, out)
        return
    if n == 2:
        _product2(generators, offsets, out)
        return
    e = np.empty((n, n), dtype=np.complex128)
    u = np.empty((n, n), dtype=np.complex128)
    tmp = np.empty((n, n), dtype=np.complex128)
    w1 = np.empty((n, n), dtype=np.complex128)
    w2 = np.empty((n, n), dtype=np.complex128)
    for p in range(offsets.shape[0] - 1):
        for i in range(n):
            for j in range(n):
                u[i, j] = 1.0 if i == j else 0.0
        count = 0
        for k in range(offsets[p], offsets[p + 1]):
            expm_small(generators[k], e, w1, w2)
            _matmul(e, u, tmp)
            for i in range(n):
                for j in range(n):
                    u[i, j] = tmp[i, j]
            count += 1
            if count % REPROJECT_EVERY == 0:
                reproject_unitary(u, w1, w2)
        out[p] = u


@njit(cache=True)
def segment_trapezoid(values, offsets, steps, out):
    """Trapezoid rule over each segment of ``values`` with step ``steps[p]``."""
    for p in range(offsets.shape[0] - 1):
        a = offsets[p]
        b = offsets[p + 1]
        s = 0.5 * (values[a] + values[b - 1])
        for k in range(a + 1, b - 1):
            s += values[k]
        out[p] = s * steps[p]


@njit(cache=True)
def group_products(factors, groups, n_groups, out):
    """``out[g] = prod of factors[i] with groups[i] == g``; empty groups give 1."""
    for g in range(n_groups):
        out[g] = 1.0
    for i in range(factors.shape[0]):
        out[groups[i]] *= factors[i]
