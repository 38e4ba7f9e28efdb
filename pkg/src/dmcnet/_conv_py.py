"""NumPy convolution kernels (the pure-Python fallback backend).

All kernels work on canonical 5-D float64 arrays ``[N, C, D, H, W]``; 2-D
callers insert a singleton depth axis. Weights follow the grouped layout
``[C_out, C_in // groups, KD, KH, KW]``. Bias is handled by the caller.

Dense convs go through im2col + batched matmul; depthwise convs use a
shift-and-accumulate loop, which avoids materialising a ``k**3``-times larger
column buffer.
"""

import numpy as np


def _window(offset, stride, count):
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _pad(x, padding):
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))


def _is_depthwise(x_channels, w, groups):
    return groups == x_channels and w.shape[0] == groups and w.shape[1] == 1


def _im2col(xp, ksize, stride, out_sp):
    n, c = xp.shape[:2]
    kd, kh, kw = ksize
    cols = np.empty((n, c, kd, kh, kw) + tuple(out_sp))
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                cols[:, :, a, b, e] = xp[
                    :,
                    :,
                    _window(a, stride[0], out_sp[0]),
                    _window(b, stride[1], out_sp[1]),
                    _window(e, stride[2], out_sp[2]),
                ]
    return cols


def conv_forward(x, w, out_sp, stride, padding, groups):
    n, ci = x.shape[:2]
    co = w.shape[0]
    ksize = w.shape[2:]
    xp = _pad(x, padding)
    if _is_depthwise(ci, w, groups):
        out = np.zeros((n, co) + tuple(out_sp))
        for a in range(ksize[0]):
            for b in range(ksize[1]):
                for e in range(ksize[2]):
                    tap = w[:, 0, a, b, e].reshape(1, co, 1, 1, 1)
                    out += tap * xp[
                        :,
                        :,
                        _window(a, stride[0], out_sp[0]),
                        _window(b, stride[1], out_sp[1]),
                        _window(e, stride[2], out_sp[2]),
                    ]
        return out
    cols = _im2col(xp, ksize, stride, out_sp)
    vout = int(np.prod(out_sp))
    cols = cols.reshape(n, groups, -1, vout)
    wm = w.reshape(groups, co // groups, -1)
    out = np.matmul(wm, cols)
    return out.reshape((n, co) + tuple(out_sp))


def conv_backward_input(gout, w, in_sp, stride, padding, groups):
    n, co = gout.shape[:2]
    out_sp = gout.shape[2:]
    cig = w.shape[1]
    ci = cig * groups
    ksize = w.shape[2:]
    padded = tuple(s + 2 * p for s, p in zip(in_sp, padding))
    gxp = np.zeros((n, ci) + padded)
    if _is_depthwise(ci, w, groups):
        for a in range(ksize[0]):
            for b in range(ksize[1]):
                for e in range(ksize[2]):
                    tap = w[:, 0, a, b, e].reshape(1, co, 1, 1, 1)
                    gxp[
                        :,
                        :,
                        _window(a, stride[0], out_sp[0]),
                        _window(b, stride[1], out_sp[1]),
                        _window(e, stride[2], out_sp[2]),
                    ] += tap * gout
    else:
        vout = int(np.prod(out_sp))
        wm = w.reshape(groups, co // groups, -1)
        gcols = np.matmul(wm.transpose(0, 2, 1), gout.reshape(n, groups, co // groups, vout))
        gcols = gcols.reshape((n, ci) + tuple(ksize) + tuple(out_sp))
        for a in range(ksize[0]):
            for b in range(ksize[1]):
                for e in range(ksize[2]):
                    gxp[
                        :,
                        :,
                        _window(a, stride[0], out_sp[0]),
                        _window(b, stride[1], out_sp[1]),
                        _window(e, stride[2], out_sp[2]),
                    ] += gcols[:, :, a, b, e]
    pd, ph, pw = padding
    return np.ascontiguousarray(
        gxp[:, :, pd : pd + in_sp[0], ph : ph + in_sp[1], pw : pw + in_sp[2]]
    )


def conv_backward_weight(gout, x, ksize, stride, padding, groups):
    n, ci = x.shape[:2]
    co = gout.shape[1]
    out_sp = gout.shape[2:]
    xp = _pad(x, padding)
    cig = ci // groups
    if groups == ci and co == groups:
        gw = np.empty((co, 1) + tuple(ksize))
        for a in range(ksize[0]):
            for b in range(ksize[1]):
                for e in range(ksize[2]):
                    shifted = xp[
                        :,
                        :,
                        _window(a, stride[0], out_sp[0]),
                        _window(b, stride[1], out_sp[1]),
                        _window(e, stride[2], out_sp[2]),
                    ]
                    gw[:, 0, a, b, e] = np.einsum("ncdhw,ncdhw->c", gout, shifted)
        return gw
    cols = _im2col(xp, ksize, stride, out_sp)
    vout = int(np.prod(out_sp))
    cols = cols.reshape(n, groups, cig * int(np.prod(ksize)), vout)
    g = gout.reshape(n, groups, co // groups, vout)
    gw = np.matmul(g, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return gw.reshape((co, cig) + tuple(ksize))
