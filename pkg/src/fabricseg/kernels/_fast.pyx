# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: conv3d, max-pool and trilinear resize (f32/f64).

Same contracts as kernels/reference.py; selected automatically at import when
built.  Loops are plain C over typed memoryviews — the inner width loop is
contiguous on the output so gcc can vectorise it.
"""

import numpy as np

name = "compiled"

ctypedef fused floating:
    float
    double


def _conv_fwd(floating[:, :, :, :, ::1] xp, floating[:, :, :, :, ::1] w,
              floating[:, :, :, :, ::1] out,
              Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
              Py_ssize_t dd, Py_ssize_t dh, Py_ssize_t dw):
    cdef Py_ssize_t nb = xp.shape[0], ci = xp.shape[1]
    cdef Py_ssize_t co = out.shape[1], do = out.shape[2], ho = out.shape[3], wo = out.shape[4]
    cdef Py_ssize_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t b, o, c, a, e, f, od, oh, ow, iz, iy, off
    cdef floating wv
    with nogil:
        for b in range(nb):
            for o in range(co):
                for c in range(ci):
                    for a in range(kd):
                        for e in range(kh):
                            for f in range(kw):
                                wv = w[o, c, a, e, f]
                                off = f * dw
                                for od in range(do):
                                    iz = od * sd + a * dd
                                    for oh in range(ho):
                                        iy = oh * sh + e * dh
                                        for ow in range(wo):
                                            out[b, o, od, oh, ow] += wv * xp[b, c, iz, iy, ow * sw + off]


def _conv_bwd_data(floating[:, :, :, :, ::1] gout, floating[:, :, :, :, ::1] w,
                   floating[:, :, :, :, ::1] gxp,
                   Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                   Py_ssize_t dd, Py_ssize_t dh, Py_ssize_t dw):
    cdef Py_ssize_t nb = gout.shape[0], co = gout.shape[1]
    cdef Py_ssize_t do = gout.shape[2], ho = gout.shape[3], wo = gout.shape[4]
    cdef Py_ssize_t ci = gxp.shape[1]
    cdef Py_ssize_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t b, o, c, a, e, f, od, oh, ow, iz, iy, off
    cdef floating wv
    with nogil:
        for b in range(nb):
            for c in range(ci):
                for o in range(co):
                    for a in range(kd):
                        for e in range(kh):
                            for f in range(kw):
                                wv = w[o, c, a, e, f]
                                off = f * dw
                                for od in range(do):
                                    iz = od * sd + a * dd
                                    for oh in range(ho):
                                        iy = oh * sh + e * dh
                                        for ow in range(wo):
                                            gxp[b, c, iz, iy, ow * sw + off] += wv * gout[b, o, od, oh, ow]


def _conv_bwd_weights(floating[:, :, :, :, ::1] gout, floating[:, :, :, :, ::1] xp,
                      floating[:, :, :, :, ::1] gw,
                      Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                      Py_ssize_t dd, Py_ssize_t dh, Py_ssize_t dw):
    cdef Py_ssize_t nb = gout.shape[0], co = gout.shape[1]
    cdef Py_ssize_t do = gout.shape[2], ho = gout.shape[3], wo = gout.shape[4]
    cdef Py_ssize_t ci = xp.shape[1]
    cdef Py_ssize_t kd = gw.shape[2], kh = gw.shape[3], kw = gw.shape[4]
    cdef Py_ssize_t b, o, c, a, e, f, od, oh, ow, iz, iy, off
    cdef floating acc
    with nogil:
        for o in range(co):
            for c in range(ci):
                for a in range(kd):
                    for e in range(kh):
                        for f in range(kw):
                            acc = 0.0
                            off = f * dw
                            for b in range(nb):
                                for od in range(do):
                                    iz = od * sd + a * dd
                                    for oh in range(ho):
                                        iy = oh * sh + e * dh
                                        for ow in range(wo):
                                            acc += gout[b, o, od, oh, ow] * xp[b, c, iz, iy, ow * sw + off]
                            gw[o, c, a, e, f] = acc


def conv3d_forward(xp, w, stride, dilation, out_spatial):
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    do, ho, wo = out_spatial
    out = np.zeros((xp.shape[0], w.shape[0], do, ho, wo), dtype=xp.dtype)
    _conv_fwd(xp, w, out, stride[0], stride[1], stride[2],
              dilation[0], dilation[1], dilation[2])
    return out


def conv3d_backward_data(gout, w, stride, dilation, xp_shape):
    gout = np.ascontiguousarray(gout)
    w = np.ascontiguousarray(w)
    gxp = np.zeros(xp_shape, dtype=gout.dtype)
    _conv_bwd_data(gout, w, gxp, stride[0], stride[1], stride[2],
                   dilation[0], dilation[1], dilation[2])
    return gxp


def conv3d_backward_weights(gout, xp, w_shape, stride, dilation):
    gout = np.ascontiguousarray(gout)
    xp = np.ascontiguousarray(xp)
    gw = np.zeros(w_shape, dtype=gout.dtype)
    _conv_bwd_weights(gout, xp, gw, stride[0], stride[1], stride[2],
                      dilation[0], dilation[1], dilation[2])
    return gw


def _maxpool_fwd(floating[:, :, :, :, ::1] x, floating[:, :, :, :, ::1] out,
                 long long[:, :, :, :, ::1] argmax, Py_ssize_t rate):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1]
    cdef Py_ssize_t h = x.shape[3], w = x.shape[4]
    cdef Py_ssize_t do = out.shape[2], ho = out.shape[3], wo = out.shape[4]
    cdef Py_ssize_t b, c, od, oh, ow, dz, dy, dx, iz, iy, ix
    cdef floating best, v
    cdef long long best_idx
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for od in range(do):
                    for oh in range(ho):
                        for ow in range(wo):
                            best = x[b, c, od * rate, oh * rate, ow * rate]
                            best_idx = (od * rate * h + oh * rate) * w + ow * rate
                            for dz in range(rate):
                                iz = od * rate + dz
                                for dy in range(rate):
                                    iy = oh * rate + dy
                                    for dx in range(rate):
                                        ix = ow * rate + dx
                                        v = x[b, c, iz, iy, ix]
                                        if v > best:
                                            best = v
                                            best_idx = (iz * h + iy) * w + ix
                            out[b, c, od, oh, ow] = best
                            argmax[b, c, od, oh, ow] = best_idx


def maxpool_forward(x, rate):
    x = np.ascontiguousarray(x)
    b, c, d, h, w = x.shape
    do, ho, wo = d // rate, h // rate, w // rate
    out = np.empty((b, c, do, ho, wo), dtype=x.dtype)
    argmax = np.empty((b, c, do, ho, wo), dtype=np.int64)
    _maxpool_fwd(x, out, argmax, rate)
    return out, argmax


def maxpool_backward(gout, argmax_flat, x_shape):
    b, c = x_shape[0], x_shape[1]
    nin = x_shape[2] * x_shape[3] * x_shape[4]
    gx = np.zeros((b * c, nin), dtype=gout.dtype)
    idx = argmax_flat.reshape(b * c, -1)
    np.put_along_axis(gx, idx, gout.reshape(b * c, -1), axis=1)
    return gx.reshape(x_shape)


def _resize_fwd(floating[:, :, :, :, ::1] x, floating[:, :, :, :, ::1] out,
                long long[::1] z0, long long[::1] z1, floating[::1] tz,
                long long[::1] y0, long long[::1] y1, floating[::1] ty,
                long long[::1] x0, long long[::1] x1, floating[::1] tx):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1]
    cdef Py_ssize_t do = out.shape[2], ho = out.shape[3], wo = out.shape[4]
    cdef Py_ssize_t b, c, od, oh, ow
    cdef Py_ssize_t az, bz, ay, by, ax, bx
    cdef floating wz, wy, wx, v00, v01, v10, v11
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for od in range(do):
                    az = z0[od]; bz = z1[od]; wz = tz[od]
                    for oh in range(ho):
                        ay = y0[oh]; by = y1[oh]; wy = ty[oh]
                        for ow in range(wo):
                            ax = x0[ow]; bx = x1[ow]; wx = tx[ow]
                            v00 = x[b, c, az, ay, ax] * (1 - wx) + x[b, c, az, ay, bx] * wx
                            v01 = x[b, c, az, by, ax] * (1 - wx) + x[b, c, az, by, bx] * wx
                            v10 = x[b, c, bz, ay, ax] * (1 - wx) + x[b, c, bz, ay, bx] * wx
                            v11 = x[b, c, bz, by, ax] * (1 - wx) + x[b, c, bz, by, bx] * wx
                            out[b, c, od, oh, ow] = (v00 * (1 - wy) + v01 * wy) * (1 - wz) \
                                + (v10 * (1 - wy) + v11 * wy) * wz


def _resize_bwd(floating[:, :, :, :, ::1] gout, floating[:, :, :, :, ::1] gx,
                long long[::1] z0, long long[::1] z1, floating[::1] tz,
                long long[::1] y0, long long[::1] y1, floating[::1] ty,
                long long[::1] x0, long long[::1] x1, floating[::1] tx):
    cdef Py_ssize_t nb = gout.shape[0], nc = gout.shape[1]
    cdef Py_ssize_t do = gout.shape[2], ho = gout.shape[3], wo = gout.shape[4]
    cdef Py_ssize_t b, c, od, oh, ow
    cdef Py_ssize_t az, bz, ay, by, ax, bx
    cdef floating wz, wy, wx, g, gz0, gz1, g00, g01, g10, g11
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for od in range(do):
                    az = z0[od]; bz = z1[od]; wz = tz[od]
                    for oh in range(ho):
                        ay = y0[oh]; by = y1[oh]; wy = ty[oh]
                        for ow in range(wo):
                            ax = x0[ow]; bx = x1[ow]; wx = tx[ow]
                            g = gout[b, c, od, oh, ow]
                            gz0 = g * (1 - wz)
                            gz1 = g * wz
                            g00 = gz0 * (1 - wy)
                            g01 = gz0 * wy
                            g10 = gz1 * (1 - wy)
                            g11 = gz1 * wy
                            gx[b, c, az, ay, ax] += g00 * (1 - wx)
                            gx[b, c, az, ay, bx] += g00 * wx
                            gx[b, c, az, by, ax] += g01 * (1 - wx)
                            gx[b, c, az, by, bx] += g01 * wx
                            gx[b, c, bz, ay, ax] += g10 * (1 - wx)
                            gx[b, c, bz, ay, bx] += g10 * wx
                            gx[b, c, bz, by, ax] += g11 * (1 - wx)
                            gx[b, c, bz, by, bx] += g11 * wx


def _tables(n, factor, dtype):
    o = np.arange(n * factor)
    pos = (o + 0.5) / factor - 0.5
    i0 = np.floor(pos).astype(np.int64)
    t = pos - i0
    t[i0 < 0] = 0.0
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i0 + 1, 0, n - 1)
    return i0c, i1c, t.astype(dtype)


def resize_trilinear_forward(x, factor):
    x = np.ascontiguousarray(x)
    if factor == 1:
        return x.copy()
    d, h, w = x.shape[2:]
    z0, z1, tz = _tables(d, factor, x.dtype)
    y0, y1, ty = _tables(h, factor, x.dtype)
    x0, x1, tx = _tables(w, factor, x.dtype)
    out = np.empty((x.shape[0], x.shape[1], d * factor, h * factor, w * factor),
                   dtype=x.dtype)
    _resize_fwd(x, out, z0, z1, tz, y0, y1, ty, x0, x1, tx)
    return out


def resize_trilinear_backward(gout, factor, in_spatial):
    gout = np.ascontiguousarray(gout)
    if factor == 1:
        return gout.copy()
    d, h, w = in_spatial
    z0, z1, tz = _tables(d, factor, gout.dtype)
    y0, y1, ty = _tables(h, factor, gout.dtype)
    x0, x1, tx = _tables(w, factor, gout.dtype)
    gx = np.zeros((gout.shape[0], gout.shape[1], d, h, w), dtype=gout.dtype)
    _resize_bwd(gout, gx, z0, z1, tz, y0, y1, ty, x0, x1, tx)
    return gx
