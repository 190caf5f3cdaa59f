# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM cell kernels; same contract as ``_lstm_py``."""
import numpy as np
from libc.math cimport exp, expm1, fabs
from scipy.linalg.cython_blas cimport dgemm


# libm tanh is several times slower than exp here; expm1 keeps tanh accurate near 0
cdef inline double _sig(double v) nogil:
    return 1.0 / (1.0 + exp(-v))


cdef inline double _tanh(double v) nogil:
    cdef double t = expm1(-2.0 * fabs(v))
    cdef double r = -t / (2.0 + t)
    return r if v >= 0 else -r


# below this many gate units per call, scalar loops beat numpy's call overhead
cdef enum:
    VEC_MIN = 256


def lstm_forward(const double[:, ::1] x, const double[:, ::1] h, const double[:, ::1] c,
                 const double[:, ::1] w, const double[::1] b):
    cdef int nb = x.shape[0], d = x.shape[1], u = h.shape[1]
    cdef int dd = d + u, g4 = 4 * u
    cdef Py_ssize_t r, j
    xh_a = np.empty((nb, dd))
    z_a = np.empty((nb, g4))
    h_a = np.empty((nb, u))
    c_a = np.empty((nb, u))
    tc_a = np.empty((nb, u))
    cdef double[:, ::1] xh = xh_a
    cdef double[:, ::1] z = z_a
    cdef double[:, ::1] hn = h_a
    cdef double[:, ::1] cn = c_a
    cdef double[:, ::1] tc = tc_a
    cdef double one = 1.0, zero = 0.0
    cdef char tr = b'T', nt = b'N'
    cdef double gi, gf, gg, go
    cdef bint vec = nb * u >= VEC_MIN
    with nogil:
        for r in range(nb):
            for j in range(d):
                xh[r, j] = x[r, j]
            for j in range(u):
                xh[r, d + j] = h[r, j]
        # z (nb x 4u, row-major) = xh @ w.T
        dgemm(&tr, &nt, &g4, &nb, &dd, &one, <double*>&w[0, 0], &dd,
              &xh[0, 0], &dd, &zero, &z[0, 0], &g4)
        if vec:
            # halve the sigmoid pre-activations so one tanh pass serves all gates
            for r in range(nb):
                for j in range(g4):
                    if 2 * u <= j < 3 * u:
                        z[r, j] = z[r, j] + b[j]
                    else:
                        z[r, j] = 0.5 * (z[r, j] + b[j])
    if vec:
        np.tanh(z_a, out=z_a)
    with nogil:
        for r in range(nb):
            for j in range(u):
                if vec:
                    gi = 0.5 * (1.0 + z[r, j])
                    gf = 0.5 * (1.0 + z[r, u + j])
                    gg = z[r, 2 * u + j]
                    go = 0.5 * (1.0 + z[r, 3 * u + j])
                else:
                    gi = _sig(z[r, j] + b[j])
                    gf = _sig(z[r, u + j] + b[u + j])
                    gg = _tanh(z[r, 2 * u + j] + b[2 * u + j])
                    go = _sig(z[r, 3 * u + j] + b[3 * u + j])
                z[r, j] = gi
                z[r, u + j] = gf
                z[r, 2 * u + j] = gg
                z[r, 3 * u + j] = go
                cn[r, j] = gf * c[r, j] + gi * gg
    if vec:
        np.tanh(c_a, out=tc_a)
    with nogil:
        for r in range(nb):
            for j in range(u):
                if not vec:
                    tc[r, j] = _tanh(cn[r, j])
                hn[r, j] = z[r, 3 * u + j] * tc[r, j]
    return h_a, c_a, z_a, tc_a


def lstm_backward(const double[:, ::1] dh, const double[:, ::1] dc,
                  const double[:, ::1] x, const double[:, ::1] h, const double[:, ::1] c,
                  const double[:, ::1] w, const double[:, ::1] gates, const double[:, ::1] tc):
    cdef int nb = x.shape[0], d = x.shape[1], u = h.shape[1]
    cdef int dd = d + u, g4 = 4 * u
    cdef Py_ssize_t r, j
    xh_a = np.empty((nb, dd))
    dz_a = np.empty((nb, g4))
    dxh_a = np.empty((nb, dd))
    dw_a = np.empty((g4, dd))
    db_a = np.zeros(g4)
    dcp_a = np.empty((nb, u))
    cdef double[:, ::1] xh = xh_a
    cdef double[:, ::1] dz = dz_a
    cdef double[:, ::1] dxh = dxh_a
    cdef double[:, ::1] dw = dw_a
    cdef double[::1] db = db_a
    cdef double[:, ::1] dcp = dcp_a
    cdef double one = 1.0, zero = 0.0
    cdef char tr = b'T', nt = b'N'
    cdef double gi, gf, gg, go, t, dct
    with nogil:
        for r in range(nb):
            for j in range(d):
                xh[r, j] = x[r, j]
            for j in range(u):
                xh[r, d + j] = h[r, j]
                gi = gates[r, j]
                gf = gates[r, u + j]
                gg = gates[r, 2 * u + j]
                go = gates[r, 3 * u + j]
                t = tc[r, j]
                dct = dc[r, j] + dh[r, j] * go * (1.0 - t * t)
                dz[r, j] = dct * gg * gi * (1.0 - gi)
                dz[r, u + j] = dct * c[r, j] * gf * (1.0 - gf)
                dz[r, 2 * u + j] = dct * gi * (1.0 - gg * gg)
                dz[r, 3 * u + j] = dh[r, j] * t * go * (1.0 - go)
                dcp[r, j] = dct * gf
            for j in range(g4):
                db[j] += dz[r, j]
        # dw (4u x dd) = dz.T @ xh
        dgemm(&nt, &tr, &dd, &g4, &nb, &one, &xh[0, 0], &dd,
              &dz[0, 0], &g4, &zero, &dw[0, 0], &dd)
        # dxh (nb x dd) = dz @ w
        dgemm(&nt, &nt, &dd, &nb, &g4, &one, <double*>&w[0, 0], &dd,
              &dz[0, 0], &g4, &zero, &dxh[0, 0], &dd)
    return dxh_a[:, :d], dxh_a[:, d:], dcp_a, dw_a, db_a
