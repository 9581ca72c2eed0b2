# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv/pool kernels; same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col3d(double[:, :, :, :, ::1] xp, kshape, Py_ssize_t stride):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t kx = kshape[0], ky = kshape[1], kz = kshape[2]
    cdef Py_ssize_t ox = (xp.shape[2] - kx) // stride + 1
    cdef Py_ssize_t oy = (xp.shape[3] - ky) // stride + 1
    cdef Py_ssize_t oz = (xp.shape[4] - kz) // stride + 1
    out = np.empty((b, c * kx * ky * kz, ox * oy * oz))
    cdef double[:, :, ::1] cols = out
    cdef Py_ssize_t n, ch, i, j, k, row, u, v, w, col
    with nogil:
        for n in range(b):
            row = 0
            for ch in range(c):
                for i in range(kx):
                    for j in range(ky):
                        for k in range(kz):
                            col = 0
                            for u in range(ox):
                                for v in range(oy):
                                    for w in range(oz):
                                        cols[n, row, col] = xp[n, ch, i + u * stride,
                                                               j + v * stride, k + w * stride]
                                        col += 1
                            row += 1
    return out


def col2im3d(double[:, :, ::1] cols, xp_shape, kshape, Py_ssize_t stride):
    cdef Py_ssize_t b = xp_shape[0], c = xp_shape[1]
    cdef Py_ssize_t kx = kshape[0], ky = kshape[1], kz = kshape[2]
    cdef Py_ssize_t ox = (xp_shape[2] - kx) // stride + 1
    cdef Py_ssize_t oy = (xp_shape[3] - ky) // stride + 1
    cdef Py_ssize_t oz = (xp_shape[4] - kz) // stride + 1
    out = np.zeros(tuple(xp_shape))
    cdef double[:, :, :, :, ::1] xp = out
    cdef Py_ssize_t n, ch, i, j, k, row, u, v, w, col
    with nogil:
        for n in range(b):
            row = 0
            for ch in range(c):
                for i in range(kx):
                    for j in range(ky):
                        for k in range(kz):
                            col = 0
                            for u in range(ox):
                                for v in range(oy):
                                    for w in range(oz):
                                        xp[n, ch, i + u * stride, j + v * stride,
                                           k + w * stride] += cols[n, row, col]
                                        col += 1
                            row += 1
    return out


def maxpool3d_forward(double[:, :, :, :, ::1] x, window, Py_ssize_t stride):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t wx = window[0], wy = window[1], wz = window[2]
    cdef Py_ssize_t ox = (x.shape[2] - wx) // stride + 1
    cdef Py_ssize_t oy = (x.shape[3] - wy) // stride + 1
    cdef Py_ssize_t oz = (x.shape[4] - wz) // stride + 1
    out_arr = np.empty((b, c, ox, oy, oz))
    arg_arr = np.empty((b, c, ox, oy, oz), dtype=np.int64)
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef long long[:, :, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, ch, u, v, w, i, j, k, pos, best_pos
    cdef double best, val
    with nogil:
        for n in range(b):
            for ch in range(c):
                for u in range(ox):
                    for v in range(oy):
                        for w in range(oz):
                            best = x[n, ch, u * stride, v * stride, w * stride]
                            best_pos = 0
                            pos = 0
                            for i in range(wx):
                                for j in range(wy):
                                    for k in range(wz):
                                        val = x[n, ch, u * stride + i, v * stride + j,
                                                w * stride + k]
                                        if val > best:
                                            best = val
                                            best_pos = pos
                                        pos += 1
                            out[n, ch, u, v, w] = best
                            arg[n, ch, u, v, w] = best_pos
    return out_arr, arg_arr


def maxpool3d_backward(double[:, :, :, :, ::1] gout, long long[:, :, :, :, ::1] arg,
                       x_shape, window, Py_ssize_t stride):
    cdef Py_ssize_t wy = window[1], wz = window[2]
    gx_arr = np.zeros(tuple(x_shape))
    cdef double[:, :, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t n, ch, u, v, w, p, i, j, k
    with nogil:
        for n in range(gout.shape[0]):
            for ch in range(gout.shape[1]):
                for u in range(gout.shape[2]):
                    for v in range(gout.shape[3]):
                        for w in range(gout.shape[4]):
                            p = arg[n, ch, u, v, w]
                            i = p // (wy * wz)
                            j = (p // wz) % wy
                            k = p % wz
                            gx[n, ch, u * stride + i, v * stride + j,
                               w * stride + k] += gout[n, ch, u, v, w]
    return gx_arr
