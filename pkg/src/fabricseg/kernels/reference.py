"""Numpy reference kernels: dilated/strided conv3d, max-pool, trilinear resize.

These are the fallback implementations used when the compiled extension is not
built.  Convolution loops over kernel taps, turning each tap into one matmul
over a strided view, which keeps peak memory at one channel-volume per tap
instead of a full im2col matrix.
"""

from __future__ import annotations

import numpy as np

name = "reference"


def _tap_view(xp: np.ndarray, tap, stride, dilation, out_spatial) -> np.ndarray:
    kd, kh, kw = tap
    sd, sh, sw = stride
    dd, dh, dw = dilation
    do, ho, wo = out_spatial
    return xp[
        :,
        :,
        kd * dd : kd * dd + (do - 1) * sd + 1 : sd,
        kh * dh : kh * dh + (ho - 1) * sh + 1 : sh,
        kw * dw : kw * dw + (wo - 1) * sw + 1 : sw,
    ]


def conv3d_forward(xp: np.ndarray, w: np.ndarray, stride, dilation, out_spatial) -> np.ndarray:
    """xp is the already-padded input (B, Ci, Dp, Hp, Wp); w is (Co, Ci, kd, kh, kw)."""
    batch, cin = xp.shape[:2]
    cout = w.shape[0]
    do, ho, wo = out_spatial
    nvox = do * ho * wo
    w2 = w.reshape(cout, cin, -1)
    out = np.zeros((batch, cout, nvox), dtype=xp.dtype)
    tmp = np.empty((batch, cout, nvox), dtype=xp.dtype)
    t = 0
    for kd in range(w.shape[2]):
        for kh in range(w.shape[3]):
            for kw in range(w.shape[4]):
                xv = _tap_view(xp, (kd, kh, kw), stride, dilation, out_spatial)
                xf = np.ascontiguousarray(xv).reshape(batch, cin, nvox)
                np.matmul(w2[:, :, t], xf, out=tmp)
                out += tmp
                t += 1
    return out.reshape(batch, cout, do, ho, wo)


def conv3d_backward_data(gout: np.ndarray, w: np.ndarray, stride, dilation, xp_shape) -> np.ndarray:
    """Gradient w.r.t. the padded input."""
    batch, cout, do, ho, wo = gout.shape
    cin = w.shape[1]
    nvox = do * ho * wo
    gxp = np.zeros(xp_shape, dtype=gout.dtype)
    gf = gout.reshape(batch, cout, nvox)
    w2 = w.reshape(cout, cin, -1)
    t = 0
    for kd in range(w.shape[2]):
        for kh in range(w.shape[3]):
            for kw in range(w.shape[4]):
                # each tap's strided view addresses distinct voxels, so += is safe
                gv = _tap_view(gxp, (kd, kh, kw), stride, dilation, (do, ho, wo))
                contrib = np.matmul(w2[:, :, t].T, gf)
                gv += contrib.reshape(batch, cin, do, ho, wo)
                t += 1
    return gxp


def conv3d_backward_weights(gout: np.ndarray, xp: np.ndarray, w_shape, stride, dilation) -> np.ndarray:
    batch, cout, do, ho, wo = gout.shape
    cin = w_shape[1]
    nvox = do * ho * wo
    gw2 = np.empty((cout, cin, w_shape[2] * w_shape[3] * w_shape[4]), dtype=gout.dtype)
    gf = gout.reshape(batch, cout, nvox)
    t = 0
    for kd in range(w_shape[2]):
        for kh in range(w_shape[3]):
            for kw in range(w_shape[4]):
                xv = _tap_view(xp, (kd, kh, kw), stride, dilation, (do, ho, wo))
                xf = np.ascontiguousarray(xv).reshape(batch, cin, nvox)
                gw2[:, :, t] = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0)
                t += 1
    return gw2.reshape(w_shape)


def maxpool_forward(x: np.ndarray, rate: int):
    """Window max with floor semantics; returns output and per-output flat spatial argmax."""
    batch, ch, d, h, w = x.shape
    d2, h2, w2 = d // rate, h // rate, w // rate
    xc = x[:, :, : d2 * rate, : h2 * rate, : w2 * rate]
    win = np.ascontiguousarray(xc).reshape(batch, ch, d2, rate, h2, rate, w2, rate)
    win = win.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(batch, ch, d2, h2, w2, rate ** 3)
    am = win.argmax(axis=-1)
    out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    dz, rem = np.divmod(am, rate * rate)
    dy, dx = np.divmod(rem, rate)
    gz = np.arange(d2).reshape(1, 1, d2, 1, 1) * rate + dz
    gy = np.arange(h2).reshape(1, 1, 1, h2, 1) * rate + dy
    gx = np.arange(w2).reshape(1, 1, 1, 1, w2) * rate + dx
    argmax_flat = (gz * h + gy) * w + gx
    return np.ascontiguousarray(out), argmax_flat.astype(np.int64)


def maxpool_backward(gout: np.ndarray, argmax_flat: np.ndarray, x_shape) -> np.ndarray:
    batch, ch = x_shape[:2]
    nin = x_shape[2] * x_shape[3] * x_shape[4]
    gx = np.zeros((batch * ch, nin), dtype=gout.dtype)
    idx = argmax_flat.reshape(batch * ch, -1)
    np.put_along_axis(gx, idx, gout.reshape(batch * ch, -1), axis=1)
    return gx.reshape(x_shape)


def _axis_tables(n: int, factor: int):
    o = np.arange(n * factor)
    pos = (o + 0.5) / factor - 0.5
    i0 = np.floor(pos).astype(np.int64)
    t = pos - i0
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i0 + 1, 0, n - 1)
    # below 0 both indices clamp to voxel 0; weights must then collapse onto it
    t[i0 < 0] = 0.0
    return i0c, i1c, t


def _upsample_axis(x: np.ndarray, factor: int) -> np.ndarray:
    """Interpolate along the last axis (align_corners=false convention)."""
    n = x.shape[-1]
    if factor == 1:
        return x.copy()
    if factor == 2:
        y = np.empty(x.shape[:-1] + (2 * n,), dtype=x.dtype)
        y[..., 0::2] = 0.75 * x
        y[..., 2::2] += 0.25 * x[..., :-1]
        y[..., 0] += 0.25 * x[..., 0]
        y[..., 1::2] = 0.75 * x
        y[..., 1:-1:2] += 0.25 * x[..., 1:]
        y[..., -1] += 0.25 * x[..., -1]
        return y
    i0c, i1c, t = _axis_tables(n, factor)
    t = t.astype(x.dtype)
    return x[..., i0c] * (1 - t) + x[..., i1c] * t


def _upsample_axis_backward(g: np.ndarray, n: int, factor: int) -> np.ndarray:
    if factor == 1:
        return g.copy()
    if factor == 2:
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = 0.75 * (ge + go)
        gx[..., :-1] += 0.25 * ge[..., 1:]
        gx[..., 0] += 0.25 * ge[..., 0]
        gx[..., 1:] += 0.25 * go[..., :-1]
        gx[..., -1] += 0.25 * go[..., -1]
        return gx
    i0c, i1c, t = _axis_tables(n, factor)
    t = t.astype(g.dtype)
    gx = np.zeros(g.shape[:-1] + (n,), dtype=g.dtype)
    np.add.at(gx, (Ellipsis, i0c), g * (1 - t))
    np.add.at(gx, (Ellipsis, i1c), g * t)
    return gx


def resize_trilinear_forward(x: np.ndarray, factor: int) -> np.ndarray:
    y = x
    for axis in (2, 3, 4):
        y = np.moveaxis(_upsample_axis(np.moveaxis(y, axis, -1), factor), -1, axis)
    return np.ascontiguousarray(y)


def resize_trilinear_backward(gout: np.ndarray, factor: int, in_spatial) -> np.ndarray:
    g = gout
    for axis, n in zip((2, 3, 4), in_spatial):
        g = np.moveaxis(_upsample_axis_backward(np.moveaxis(g, axis, -1), n, factor), -1, axis)
    return np.ascontiguousarray(g)
