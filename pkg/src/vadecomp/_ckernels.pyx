# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled voxel kernels; same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def scatter_trilinear(q, w, Py_ssize_t n):
    cdef double[:, ::1] qv = np.ascontiguousarray(q, dtype=np.float64).reshape(-1, 3)
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    out = np.zeros((n, n, n))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t k, m = qv.shape[0]
    cdef Py_ssize_t i0, j0, k0, a, b, c, ia, jb, kc
    cdef double fx, fy, fz, wx, wy, wz, wk
    for k in range(m):
        fx = floor(qv[k, 0])
        fy = floor(qv[k, 1])
        fz = floor(qv[k, 2])
        i0 = <Py_ssize_t>fx
        j0 = <Py_ssize_t>fy
        k0 = <Py_ssize_t>fz
        fx = qv[k, 0] - fx
        fy = qv[k, 1] - fy
        fz = qv[k, 2] - fz
        wk = wv[k]
        for a in range(2):
            ia = i0 + a
            if ia < 0 or ia >= n:
                continue
            wx = fx if a else 1.0 - fx
            for b in range(2):
                jb = j0 + b
                if jb < 0 or jb >= n:
                    continue
                wy = fy if b else 1.0 - fy
                for c in range(2):
                    kc = k0 + c
                    if kc < 0 or kc >= n:
                        continue
                    wz = fz if c else 1.0 - fz
                    o[ia, jb, kc] += wk * wx * wy * wz
    return out


def scatter_nearest(q, w, Py_ssize_t n):
    cdef double[:, ::1] qv = np.ascontiguousarray(q, dtype=np.float64).reshape(-1, 3)
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    out = np.zeros((n, n, n))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t k, m = qv.shape[0]
    cdef Py_ssize_t i, j, l
    for k in range(m):
        i = <Py_ssize_t>floor(qv[k, 0] + 0.5)
        j = <Py_ssize_t>floor(qv[k, 1] + 0.5)
        l = <Py_ssize_t>floor(qv[k, 2] + 0.5)
        if i < 0 or i >= n or j < 0 or j >= n or l < 0 or l >= n:
            continue
        o[i, j, l] += wv[k]
    return out


def gather_trilinear(img, q):
    cdef double[:, :, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    cdef double[:, ::1] qv = np.ascontiguousarray(q, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t n = im.shape[0]
    cdef Py_ssize_t k, m = qv.shape[0]
    val = np.zeros(m)
    grad = np.zeros((m, 3))
    cdef double[::1] vv = val
    cdef double[:, ::1] gv = grad
    cdef Py_ssize_t i0, j0, k0, a, b, c, ia, jb, kc
    cdef double fx, fy, fz, wx, wy, wz, sx, sy, sz, v
    for k in range(m):
        fx = floor(qv[k, 0])
        fy = floor(qv[k, 1])
        fz = floor(qv[k, 2])
        i0 = <Py_ssize_t>fx
        j0 = <Py_ssize_t>fy
        k0 = <Py_ssize_t>fz
        fx = qv[k, 0] - fx
        fy = qv[k, 1] - fy
        fz = qv[k, 2] - fz
        for a in range(2):
            ia = i0 + a
            if ia < 0 or ia >= n:
                continue
            wx = fx if a else 1.0 - fx
            sx = 1.0 if a else -1.0
            for b in range(2):
                jb = j0 + b
                if jb < 0 or jb >= n:
                    continue
                wy = fy if b else 1.0 - fy
                sy = 1.0 if b else -1.0
                for c in range(2):
                    kc = k0 + c
                    if kc < 0 or kc >= n:
                        continue
                    wz = fz if c else 1.0 - fz
                    sz = 1.0 if c else -1.0
                    v = im[ia, jb, kc]
                    vv[k] += v * wx * wy * wz
                    gv[k, 0] += v * sx * wy * wz
                    gv[k, 1] += v * wx * sy * wz
                    gv[k, 2] += v * wx * wy * sz
    return val, grad


def crosstalk(img, double frac):
    cdef double[:, :, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    cdef Py_ssize_t n0 = im.shape[0], n1 = im.shape[1], n2 = im.shape[2]
    out = np.empty((n0, n1, n2))
    cdef double[:, :, ::1] o = out
    cdef double keep = 1.0 - 6.0 * frac
    cdef Py_ssize_t i, j, k
    cdef double s
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                s = 0.0
                if i > 0:
                    s += im[i - 1, j, k]
                if i < n0 - 1:
                    s += im[i + 1, j, k]
                if j > 0:
                    s += im[i, j - 1, k]
                if j < n1 - 1:
                    s += im[i, j + 1, k]
                if k > 0:
                    s += im[i, j, k - 1]
                if k < n2 - 1:
                    s += im[i, j, k + 1]
                o[i, j, k] = keep * im[i, j, k] + frac * s
    return out
