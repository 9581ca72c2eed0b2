"""Pure-numpy kernels. Reference path and fallback for the compiled module.

All arrays are float64, C-contiguous, laid out (B, C, X, Y, Z). Inputs to
``im2col3d`` are already padded.
"""

import numpy as np


def _out_extent(n, k, s):
    return (n - k) // s + 1


def im2col3d(xp, kshape, stride):
    b, c, x, y, z = xp.shape
    kx, ky, kz = kshape
    ox, oy, oz = (_out_extent(n, k, stride) for n, k in zip((x, y, z), kshape))
    cols = np.empty((b, c, kx, ky, kz, ox, oy, oz))
    for i in range(kx):
        xs = slice(i, i + stride * ox, stride)
        for j in range(ky):
            ys = slice(j, j + stride * oy, stride)
            for k in range(kz):
                zs = slice(k, k + stride * oz, stride)
                cols[:, :, i, j, k] = xp[:, :, xs, ys, zs]
    return cols.reshape(b, c * kx * ky * kz, ox * oy * oz)


def col2im3d(cols, xp_shape, kshape, stride):
    b, c, x, y, z = xp_shape
    kx, ky, kz = kshape
    ox, oy, oz = (_out_extent(n, k, stride) for n, k in zip((x, y, z), kshape))
    cols = cols.reshape(b, c, kx, ky, kz, ox, oy, oz)
    out = np.zeros(xp_shape)
    for i in range(kx):
        xs = slice(i, i + stride * ox, stride)
        for j in range(ky):
            ys = slice(j, j + stride * oy, stride)
            for k in range(kz):
                zs = slice(k, k + stride * oz, stride)
                out[:, :, xs, ys, zs] += cols[:, :, i, j, k]
    return out


def maxpool3d_forward(x, window, stride):
    """Windowed maximum; ties resolve to the first element in scan order."""
    b, c, nx, ny, nz = x.shape
    wx, wy, wz = window
    ox, oy, oz = (_out_extent(n, w, stride) for n, w in zip((nx, ny, nz), window))
    out = np.full((b, c, ox, oy, oz), -np.inf)
    arg = np.zeros((b, c, ox, oy, oz), dtype=np.int64)
    pos = 0
    for i in range(wx):
        for j in range(wy):
            for k in range(wz):
                v = x[:, :, i:i + stride * ox:stride, j:j + stride * oy:stride,
                      k:k + stride * oz:stride]
                better = v > out
                out[better] = v[better]
                arg[better] = pos
                pos += 1
    return out, arg


def maxpool3d_backward(gout, arg, x_shape, window, stride):
    wx, wy, wz = window
    _, _, ox, oy, oz = gout.shape
    gx = np.zeros(x_shape)
    pos = 0
    for i in range(wx):
        for j in range(wy):
            for k in range(wz):
                gx[:, :, i:i + stride * ox:stride, j:j + stride * oy:stride,
                   k:k + stride * oz:stride] += np.where(arg == pos, gout, 0.0)
                pos += 1
    return gx
