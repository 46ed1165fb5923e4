# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled hot kernels: cosine self-attention and the fused two-layer perceptron."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef extern from "cosattn.h":
    int cosattn_forward(const double *x, double *y, double *z, double *q, double *r,
                        int nb, int n, int d, double scale) nogil
    int cosattn_backward(const double *x, const double *y, const double *z, const double *q,
                         const double *r, const double *gy, double *gx,
                         int nb, int n, int d, double scale) nogil


def forward(x, double scale):
    """Return ``(y, ctx)`` for a ``(nb, n, d)`` float64 block; ``ctx`` feeds :func:`backward`."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] xc = np.ascontiguousarray(x, dtype=np.float64)
    cdef int nb = xc.shape[0], n = xc.shape[1], d = xc.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] y = np.empty((nb, n, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] z = np.empty((nb, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] q = np.empty((nb, n, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] r = np.empty((nb, n))
    cdef int status
    if nb == 0 or n == 0 or d == 0:
        return np.zeros((nb, n, d)), (xc, y, z, q, r)
    with nogil:
        status = cosattn_forward(&xc[0, 0, 0], &y[0, 0, 0], &z[0, 0], &q[0, 0, 0], &r[0, 0],
                                 nb, n, d, scale)
    if status != 0:
        raise MemoryError("cosattn_forward could not allocate scratch buffers")
    return y, (xc, y, z, q, r)


def backward(ctx, gy, double scale):
    """Gradient w.r.t. ``x`` given the upstream gradient ``gy``."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] xc = ctx[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] yc = ctx[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] zc = ctx[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] qc = ctx[3]
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] rc = ctx[4]
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] gyc = np.ascontiguousarray(gy, dtype=np.float64)
    cdef int nb = xc.shape[0], n = xc.shape[1], d = xc.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] gx = np.zeros((nb, n, d))
    cdef int status
    if nb == 0 or n == 0 or d == 0:
        return gx
    with nogil:
        status = cosattn_backward(&xc[0, 0, 0], &yc[0, 0, 0], &zc[0, 0], &qc[0, 0, 0], &rc[0, 0],
                                  &gyc[0, 0, 0], &gx[0, 0, 0], nb, n, d, scale)
    if status != 0:
        raise MemoryError("cosattn_backward could not allocate scratch buffers")
    return gx


cdef extern from "mlp.h":
    int mlp_forward(const double *c, const double *w1, const double *b1, const double *w2,
                    const double *b2, const double *keep, const double *rows,
                    double *act, double *out, int m, int din, int hid, int dout) nogil
    int mlp_backward(const double *c, const double *w1, const double *w2, const double *act,
                     const double *keep, const double *rows, const double *gout,
                     double *gc, double *gw1, double *gb1, double *gw2, double *gb2,
                     int m, int din, int hid, int dout) nogil


cdef const double *_opt_ptr(cnp.ndarray arr):
    if arr is None:
        return NULL
    return <const double *>cnp.PyArray_DATA(arr)


def _c2(a):
    return None if a is None else np.ascontiguousarray(a, dtype=np.float64)


def mlp_fwd(c, w1, b1, w2, b2, keep=None, rows=None):
    """Return ``(out, ctx)`` for 2-D ``c``; ``keep`` is ``(m, hid)`` and ``rows`` is ``(m,)`` or None."""
    cdef cnp.ndarray cc = _c2(c), w1c = _c2(w1), b1c = _c2(b1), w2c = _c2(w2), b2c = _c2(b2)
    cdef cnp.ndarray kc = _c2(keep), rc = _c2(rows)
    cdef int m = cc.shape[0], din = cc.shape[1], hid = w1c.shape[1], dout = w2c.shape[1]
    cdef cnp.ndarray act = np.empty((m, hid))
    cdef cnp.ndarray out = np.empty((m, dout))
    cdef int status
    cdef const double *kp = _opt_ptr(kc)
    cdef const double *rp = _opt_ptr(rc)
    with nogil:
        status = mlp_forward(<const double *>cnp.PyArray_DATA(cc), <const double *>cnp.PyArray_DATA(w1c),
                             <const double *>cnp.PyArray_DATA(b1c), <const double *>cnp.PyArray_DATA(w2c),
                             <const double *>cnp.PyArray_DATA(b2c), kp, rp,
                             <double *>cnp.PyArray_DATA(act), <double *>cnp.PyArray_DATA(out),
                             m, din, hid, dout)
    if status != 0:
        raise MemoryError("mlp_forward could not allocate scratch buffers")
    return out, (cc, w1c, w2c, act, kc, rc)


def mlp_bwd(ctx, gout):
    """Return ``(gc, gw1, gb1, gw2, gb2)``."""
    cdef cnp.ndarray cc = ctx[0], w1c = ctx[1], w2c = ctx[2], act = ctx[3]
    cdef cnp.ndarray kc = ctx[4], rc = ctx[5]
    cdef cnp.ndarray gc_ = np.ascontiguousarray(gout, dtype=np.float64)
    cdef int m = cc.shape[0], din = cc.shape[1], hid = w1c.shape[1], dout = w2c.shape[1]
    cdef cnp.ndarray gc = np.empty((m, din)), gw1 = np.empty((din, hid)), gb1 = np.empty(hid)
    cdef cnp.ndarray gw2 = np.empty((hid, dout)), gb2 = np.empty(dout)
    cdef int status
    cdef const double *kp = _opt_ptr(kc)
    cdef const double *rp = _opt_ptr(rc)
    with nogil:
        status = mlp_backward(<const double *>cnp.PyArray_DATA(cc), <const double *>cnp.PyArray_DATA(w1c),
                              <const double *>cnp.PyArray_DATA(w2c), <const double *>cnp.PyArray_DATA(act),
                              kp, rp, <const double *>cnp.PyArray_DATA(gc_),
                              <double *>cnp.PyArray_DATA(gc), <double *>cnp.PyArray_DATA(gw1),
                              <double *>cnp.PyArray_DATA(gb1), <double *>cnp.PyArray_DATA(gw2),
                              <double *>cnp.PyArray_DATA(gb2), m, din, hid, dout)
    if status != 0:
        raise MemoryError("mlp_backward could not allocate scratch buffers")
    return gc, gw1, gb1, gw2, gb2
