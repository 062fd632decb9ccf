# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for 6D decoding, forward kinematics and LSTM cell pointwise math.

Mirrors ``_kernels_py`` exactly in signature and semantics; per-row loops over
3x3 blocks avoid numpy's per-call overhead on tiny matrices.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

cdef double EPS = 1e-9


def rot6d_to_matrix(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty((n, 3, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double a1x, a1y, a1z, a2x, a2y, a2z, n1, d, ux, uy, uz, n2
    cdef double b1x, b1y, b1z, b2x, b2y, b2z
    cdef Py_ssize_t first_bad = -1
    with nogil:
        for i in range(n):
            a1x = x[i, 0]; a1y = x[i, 1]; a1z = x[i, 2]
            a2x = x[i, 3]; a2y = x[i, 4]; a2z = x[i, 5]
            n1 = sqrt(a1x * a1x + a1y * a1y + a1z * a1z)
            if n1 <= EPS:
                if first_bad < 0:
                    first_bad = i
                n1 = 1.0
            b1x = a1x / n1; b1y = a1y / n1; b1z = a1z / n1
            d = b1x * a2x + b1y * a2y + b1z * a2z
            ux = a2x - d * b1x; uy = a2y - d * b1y; uz = a2z - d * b1z
            n2 = sqrt(ux * ux + uy * uy + uz * uz)
            if n2 <= EPS:
                if first_bad < 0:
                    first_bad = i
                n2 = 1.0
            b2x = ux / n2; b2y = uy / n2; b2z = uz / n2
            out[i, 0, 0] = b1x; out[i, 1, 0] = b1y; out[i, 2, 0] = b1z
            out[i, 0, 1] = b2x; out[i, 1, 1] = b2y; out[i, 2, 1] = b2z
            out[i, 0, 2] = b1y * b2z - b1z * b2y
            out[i, 1, 2] = b1z * b2x - b1x * b2z
            out[i, 2, 2] = b1x * b2y - b1y * b2x
    return out_arr, first_bad


def rot6d_to_matrix_backward(const double[:, ::1] x, const double[:, :, ::1] mats,
                             const double[:, :, ::1] grad):
    cdef Py_ssize_t n = x.shape[0], i, k
    gx_arr = np.empty((n, 6))
    cdef double[:, ::1] gx = gx_arr
    cdef double a1[3]
    cdef double a2[3]
    cdef double b1[3]
    cdef double b2[3]
    cdef double g3[3]
    cdef double gb1[3]
    cdef double gb2[3]
    cdef double u[3]
    cdef double gu[3]
    cdef double n1, n2, d, gd, s
    with nogil:
        for i in range(n):
            for k in range(3):
                a1[k] = x[i, k]
                a2[k] = x[i, 3 + k]
                b1[k] = mats[i, k, 0]
                b2[k] = mats[i, k, 1]
                g3[k] = grad[i, k, 2]
            n1 = sqrt(a1[0] * a1[0] + a1[1] * a1[1] + a1[2] * a1[2])
            d = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2]
            for k in range(3):
                u[k] = a2[k] - d * b1[k]
            n2 = sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
            # b3 = b1 x b2
            gb1[0] = grad[i, 0, 0] + b2[1] * g3[2] - b2[2] * g3[1]
            gb1[1] = grad[i, 1, 0] + b2[2] * g3[0] - b2[0] * g3[2]
            gb1[2] = grad[i, 2, 0] + b2[0] * g3[1] - b2[1] * g3[0]
            gb2[0] = grad[i, 0, 1] + g3[1] * b1[2] - g3[2] * b1[1]
            gb2[1] = grad[i, 1, 1] + g3[2] * b1[0] - g3[0] * b1[2]
            gb2[2] = grad[i, 2, 1] + g3[0] * b1[1] - g3[1] * b1[0]
            s = b2[0] * gb2[0] + b2[1] * gb2[1] + b2[2] * gb2[2]
            for k in range(3):
                gu[k] = (gb2[k] - b2[k] * s) / n2
            gd = -(b1[0] * gu[0] + b1[1] * gu[1] + b1[2] * gu[2])
            for k in range(3):
                gb1[k] = gb1[k] - d * gu[k] + gd * a2[k]
                gx[i, 3 + k] = gu[k] + gd * b1[k]
            s = b1[0] * gb1[0] + b1[1] * gb1[1] + b1[2] * gb1[2]
            for k in range(3):
                gx[i, k] = (gb1[k] - b1[k] * s) / n1
    return gx_arr


def fk_forward(const double[:, :, :, ::1] local, const double[:, ::1] root,
               const double[:, ::1] offsets, const long long[::1] parents):
    cdef Py_ssize_t n = local.shape[0], nj = local.shape[1], i, k, p, r, c, m
    grot_arr = np.empty((n, nj, 3, 3))
    gpos_arr = np.empty((n, nj, 3))
    cdef double[:, :, :, ::1] grot = grot_arr
    cdef double[:, :, ::1] gpos = gpos_arr
    cdef double acc
    with nogil:
        for i in range(n):
            for r in range(3):
                gpos[i, 0, r] = root[i, r]
                for c in range(3):
                    grot[i, 0, r, c] = local[i, 0, r, c]
            for k in range(1, nj):
                p = parents[k]
                for r in range(3):
                    for c in range(3):
                        acc = 0.0
                        for m in range(3):
                            acc = acc + grot[i, p, r, m] * local[i, k, m, c]
                        grot[i, k, r, c] = acc
                    acc = gpos[i, p, r]
                    for m in range(3):
                        acc = acc + grot[i, p, r, m] * offsets[k, m]
                    gpos[i, k, r] = acc
    return grot_arr, gpos_arr


def fk_backward(const double[:, :, :, ::1] local, const double[:, :, :, ::1] grot,
                const double[:, ::1] offsets, const long long[::1] parents,
                const double[:, :, :, ::1] g_rot_in, const double[:, :, ::1] g_pos_in):
    cdef Py_ssize_t n = local.shape[0], nj = local.shape[1], i, k, p, r, c, m
    g_rot_arr = np.array(g_rot_in, copy=True)
    g_pos_arr = np.array(g_pos_in, copy=True)
    g_local_arr = np.empty((n, nj, 3, 3))
    g_root_arr = np.empty((n, 3))
    cdef double[:, :, :, ::1] g_rot = g_rot_arr
    cdef double[:, :, ::1] g_pos = g_pos_arr
    cdef double[:, :, :, ::1] g_local = g_local_arr
    cdef double[:, ::1] g_root = g_root_arr
    cdef double acc
    with nogil:
        for i in range(n):
            for k in range(nj - 1, 0, -1):
                p = parents[k]
                for r in range(3):
                    for c in range(3):
                        # g_local = G_p^T g_rot_k
                        acc = 0.0
                        for m in range(3):
                            acc = acc + grot[i, p, m, r] * g_rot[i, k, m, c]
                        g_local[i, k, r, c] = acc
                for r in range(3):
                    for c in range(3):
                        # g_rot_p += g_rot_k R_k^T + g_pos_k o_k^T
                        acc = g_pos[i, k, r] * offsets[k, c]
                        for m in range(3):
                            acc = acc + g_rot[i, k, r, m] * local[i, k, c, m]
                        g_rot[i, p, r, c] += acc
                    g_pos[i, p, r] += g_pos[i, k, r]
            for r in range(3):
                g_root[i, r] = g_pos[i, 0, r]
                for c in range(3):
                    g_local[i, 0, r, c] = g_rot[i, 0, r, c]
    return g_local_arr, g_root_arr


cdef inline double _sig(double z) noexcept nogil:
    return 1.0 / (1.0 + exp(-z))


cdef inline double _tanh(double z) noexcept nogil:
    return 1.0 - 2.0 / (1.0 + exp(2.0 * z))


def lstm_cell_forward(double[:, ::1] a, const double[:, ::1] c_prev, double[:, ::1] c,
                      double[:, ::1] tc, double[:, ::1] h):
    cdef Py_ssize_t B = a.shape[0], H = c.shape[1], b, k
    cdef double i, f, g, o
    with nogil:
        for b in range(B):
            for k in range(H):
                i = _sig(a[b, k])
                f = _sig(a[b, H + k])
                g = _tanh(a[b, 2 * H + k])
                o = _sig(a[b, 3 * H + k])
                a[b, k] = i
                a[b, H + k] = f
                a[b, 2 * H + k] = g
                a[b, 3 * H + k] = o
                c[b, k] = f * c_prev[b, k] + i * g
                tc[b, k] = _tanh(c[b, k])
                h[b, k] = o * tc[b, k]


def lstm_cell_backward(const double[:, ::1] a, const double[:, ::1] c_prev, const double[:, ::1] tc,
                       const double[:, ::1] dh, double[:, ::1] dc, double[:, ::1] dz):
    """``dc`` holds the incoming cell gradient and is overwritten with the one for ``c_prev``."""
    cdef Py_ssize_t B = a.shape[0], H = tc.shape[1], b, k
    cdef double i, f, g, o, t, d, gh
    with nogil:
        for b in range(B):
            for k in range(H):
                i = a[b, k]
                f = a[b, H + k]
                g = a[b, 2 * H + k]
                o = a[b, 3 * H + k]
                t = tc[b, k]
                gh = dh[b, k]
                d = dc[b, k] + gh * o * (1.0 - t * t)
                dz[b, k] = d * g * i * (1.0 - i)
                dz[b, H + k] = d * c_prev[b, k] * f * (1.0 - f)
                dz[b, 2 * H + k] = d * i * (1.0 - g * g)
                dz[b, 3 * H + k] = gh * t * o * (1.0 - o)
                dc[b, k] = d * f
