# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend; semantics mirror _py.py exactly.

BLAS does the matrix work and the elementwise loops run without interpreter
dispatch, which is where the pure-numpy backend loses time on widths this
small. Results may differ from _py.py in the last ulp (libm vs numpy
transcendentals), never more.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, tanh
from scipy.linalg.cython_blas cimport ddot, dgemv, dger

cnp.import_array()

ACT_IDS = {"tanh": 0, "softplus": 1, "relu": 2}
MODE_IDS = {"pre-scale": 0, "post-scale": 1}

BACKEND = "c"

cdef int INC1 = 1
cdef double ONE = 1.0
cdef double ZERO = 0.0


cdef inline double _dot(double[::1] a, double[::1] b) noexcept:
    cdef int n = a.shape[0]
    if n == 0:
        return 0.0
    return ddot(&n, &a[0], &INC1, &b[0], &INC1)


cdef inline void _matvec(double[:, ::1] w, double[::1] h, double[::1] out) noexcept:
    # out = w @ h for C-contiguous w; BLAS sees the transposed Fortran view
    cdef int m = w.shape[0]
    cdef int n = w.shape[1]
    dgemv("T", &n, &m, &ONE, &w[0, 0], &n, &h[0], &INC1, &ZERO, &out[0], &INC1)


cdef inline void _matvec_t(double[:, ::1] w, double[::1] g, double[::1] out) noexcept:
    # out = w.T @ g
    cdef int m = w.shape[0]
    cdef int n = w.shape[1]
    dgemv("N", &n, &m, &ONE, &w[0, 0], &n, &g[0], &INC1, &ZERO, &out[0], &INC1)


cdef inline void _rank1_acc(double[:, ::1] gw, double[::1] gu, double[::1] hprev) noexcept:
    # gw += outer(gu, hprev)
    cdef int m = gw.shape[0]
    cdef int n = gw.shape[1]
    dger(&n, &m, &ONE, &hprev[0], &INC1, &gu[0], &INC1, &gw[0, 0], &n)


cdef inline void _act_fwd(int act, double[::1] x, double[::1] out) noexcept:
    cdef Py_ssize_t i
    cdef double v
    for i in range(x.shape[0]):
        v = x[i]
        if act == 0:
            out[i] = tanh(v)
        elif act == 1:
            out[i] = v + log1p(exp(-v)) if v > 0.0 else log1p(exp(v))
        else:
            out[i] = v if v > 0.0 else 0.0


cdef inline void _act_bwd(int act, double[::1] x, double[::1] gu, double[::1] out) noexcept:
    cdef Py_ssize_t i
    cdef double v, t
    for i in range(x.shape[0]):
        v = x[i]
        if act == 0:
            t = tanh(v)
            out[i] = (1.0 - t * t) * gu[i]
        elif act == 1:
            out[i] = gu[i] / (1.0 + exp(-v))
        else:
            out[i] = gu[i] if v > 0.0 else 0.0


cdef inline bint _any_nonzero(double[::1] d) noexcept:
    cdef Py_ssize_t i
    for i in range(d.shape[0]):
        if d[i] != 0.0:
            return True
    return False


def forward_pass(list weights, x, deltas, int mode, int act):
    """Mirror of _py.forward_pass; see there for the contract."""
    cdef int r = len(weights)
    cdef int k = 2 * r - 1
    cdef int j
    hs = [None] * (k + 1)
    us = [None] * (k + 1)
    norms = np.empty(k + 1)
    cdef double[::1] norms_v = norms
    h = np.ascontiguousarray(x, dtype=np.float64)
    hs[0] = us[0] = h
    cdef double[::1] hv = h
    norms_v[0] = sqrt(_dot(hv, hv))
    cdef double[::1] prev, uv, dv
    cdef double[:, ::1] wv
    cdef Py_ssize_t i
    cdef double s
    for j in range(1, k + 1):
        prev = hs[j - 1]
        if j % 2 == 1:
            wv = weights[(j - 1) // 2]
            u = np.empty(wv.shape[0])
            uv = u
            _matvec(wv, prev, uv)
        else:
            u = np.empty(prev.shape[0])
            uv = u
            _act_fwd(act, prev, uv)
        d = deltas[j - 1] if deltas is not None else None
        if d is not None and d.size > 0:
            dv = d
            if _any_nonzero(dv):
                hn = np.empty(uv.shape[0])
                hv = hn
                s = norms_v[j - 1] if mode == 0 else sqrt(_dot(uv, uv))
                for i in range(uv.shape[0]):
                    hv[i] = uv[i] + s * dv[i]
                us[j] = u
                hs[j] = hn
                norms_v[j] = sqrt(_dot(hv, hv))
                continue
        us[j] = u
        hs[j] = u
        norms_v[j] = sqrt(_dot(uv, uv))
    return hs, us, norms


def head_values(logits, y):
    """Mirror of _py.head_values."""
    cdef double[::1] z = logits
    cdef int n = z.shape[0]
    cdef int j, yi = int(y)
    cdef double sign, m, zmax, acc, best, loss
    if n == 1:
        sign = 1.0 if yi > 0 else -1.0
        m = sign * z[0]
        loss = log1p(exp(-m)) if m > 0.0 else -m + log1p(exp(m))
        return loss, m
    zmax = z[0]
    for j in range(1, n):
        if z[j] > zmax:
            zmax = z[j]
    acc = 0.0
    for j in range(n):
        acc += exp(z[j] - zmax)
    loss = zmax + log(acc) - z[yi]
    best = -1e308
    for j in range(n):
        if j != yi and z[j] > best:
            best = z[j]
    return loss, z[yi] - best


cdef void _head_grad(double[::1] z, int y, int head, double[::1] out) noexcept:
    cdef int n = z.shape[0]
    cdef int j, best_j
    cdef double sign, zmax, acc, best
    if n == 1:
        sign = 1.0 if y > 0 else -1.0
        if head == 0:
            out[0] = -sign / (1.0 + exp(sign * z[0]))
        else:
            out[0] = sign
        return
    if head == 0:
        zmax = z[0]
        for j in range(1, n):
            if z[j] > zmax:
                zmax = z[j]
        acc = 0.0
        for j in range(n):
            out[j] = exp(z[j] - zmax)
            acc += out[j]
        for j in range(n):
            out[j] /= acc
        out[y] -= 1.0
        return
    best = -1e308
    best_j = -1
    for j in range(n):
        out[j] = 0.0
        if j != y and z[j] > best:
            best = z[j]
            best_j = j
    out[y] = 1.0
    out[best_j] = -1.0


def backward_pass(list weights, x, y, deltas, int mode, int act, int head,
                  bint need_gw=False, bint need_gx=False, bint need_gd=False):
    """Mirror of _py.backward_pass; see there for the contract."""
    cdef int r = len(weights)
    cdef int k = 2 * r - 1
    cdef int j, wi
    hs, us, norms = forward_pass(weights, x, deltas, mode, act)
    cdef double[::1] norms_v = norms
    loss, gap = head_values(hs[k], y)

    gws = [np.zeros_like(w) for w in weights] if need_gw else None
    gds = [None] * k if need_gd else None

    g = np.empty((<object> hs[k]).shape[0])
    cdef double[::1] gv = g
    _head_grad(hs[k], int(y), head, gv)

    cdef double[::1] dv, uv, prev_v, gu_v, gprev_v, gd_v
    cdef double[:, ::1] wv, gw_v
    cdef bint exists, live
    cdef double un, coeff
    cdef Py_ssize_t i
    for j in range(k, 0, -1):
        d = deltas[j - 1] if deltas is not None else None
        exists = d is not None and d.size > 0
        live = False
        if exists:
            dv = d
            live = _any_nonzero(dv)
        if exists and mode == 1:
            uv = us[j]
            un = sqrt(_dot(uv, uv))
            if need_gd:
                gd = np.empty(gv.shape[0])
                gd_v = gd
                for i in range(gv.shape[0]):
                    gd_v[i] = un * gv[i]
                gds[j - 1] = gd
            if live and un > 0.0:
                gu = np.empty(gv.shape[0])
                gu_v = gu
                coeff = _dot(dv, gv) / un
                for i in range(gv.shape[0]):
                    gu_v[i] = gv[i] + coeff * uv[i]
            else:
                gu = g
                gu_v = gv
        else:
            if exists and need_gd:
                gd = np.empty(gv.shape[0])
                gd_v = gd
                for i in range(gv.shape[0]):
                    gd_v[i] = norms_v[j - 1] * gv[i]
                gds[j - 1] = gd
            gu = g
            gu_v = gv
        # pull gu back through f_j
        prev_v = hs[j - 1]
        if j % 2 == 1:
            wi = (j - 1) // 2
            wv = weights[wi]
            if need_gw:
                gw_v = gws[wi]
                _rank1_acc(gw_v, gu_v, prev_v)
            gprev = np.empty(wv.shape[1])
            gprev_v = gprev
            _matvec_t(wv, gu_v, gprev_v)
        else:
            gprev = np.empty(prev_v.shape[0])
            gprev_v = gprev
            _act_bwd(act, prev_v, gu_v, gprev_v)
        if live and mode == 0 and norms_v[j - 1] > 0.0:
            # the pre-scale term s_{j-1} * delta also depends on h_{j-1}
            coeff = _dot(dv, gv) / norms_v[j - 1]
            for i in range(gprev_v.shape[0]):
                gprev_v[i] = gprev_v[i] + coeff * prev_v[i]
        g = gprev
        gv = gprev_v
    gx = g if need_gx else None
    return loss, gap, gws, gx, gds
