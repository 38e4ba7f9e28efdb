# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Convolution kernels (compiled backend).

Same contract as ``dmcnet._conv_py``: canonical ``[N, C, D, H, W]`` float64
arrays, grouped weights ``[C_out, C_in // groups, KD, KH, KW]``, bias handled
by the caller.

Dense convs unfold a cache-sized chunk of output rows into a column buffer and
hand it to ``dgemm``; the buffer never grows with the volume. Depthwise convs
use direct row loops. Chunk boundaries and loop orders are fixed, so every
reduction is bit-reproducible.
"""

import numpy as np
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm

# column-buffer budget in doubles (1 MiB)
DEF COL_BUDGET = 131072


cdef inline Py_ssize_t _src(Py_ssize_t o, Py_ssize_t s, Py_ssize_t k, Py_ssize_t p,
                            Py_ssize_t n_in) noexcept nogil:
    # input index feeding output o through tap k, or -1 when it lands in padding
    cdef Py_ssize_t i = o * s + k - p
    if i < 0 or i >= n_in:
        return -1
    return i


cdef inline void _valid(Py_ssize_t k, Py_ssize_t s, Py_ssize_t p, Py_ssize_t n_in,
                        Py_ssize_t n_out, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output indices o in [lo, hi) with 0 <= o*s + k - p < n_in
    cdef Py_ssize_t a = p - k
    cdef Py_ssize_t b = n_in - 1 + p - k
    if a <= 0:
        lo[0] = 0
    else:
        lo[0] = (a + s - 1) // s
    if b < 0:
        hi[0] = 0
    else:
        hi[0] = b // s + 1
        if hi[0] > n_out:
            hi[0] = n_out
    if hi[0] < lo[0]:
        hi[0] = lo[0]


cdef void _gemm(char ta, char tb, int m, int n, int k, double alpha, double* a, int lda,
                double* b, int ldb, double beta, double* c, int ldc) noexcept nogil:
    # row-major C[m, n] = alpha * op(A) @ op(B) + beta * C, via column-major dgemm on C^T
    dgemm(&tb, &ta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef struct Geom:
    Py_ssize_t D, H, W, OD, OH, OW, KD, KH, KW
    Py_ssize_t sd, sh, sw, pd, ph, pw


cdef Geom _geom(tuple in_sp, tuple out_sp, tuple ksize, tuple stride, tuple padding):
    cdef Geom g
    g.D, g.H, g.W = in_sp
    g.OD, g.OH, g.OW = out_sp
    g.KD, g.KH, g.KW = ksize
    g.sd, g.sh, g.sw = stride
    g.pd, g.ph, g.pw = padding
    return g


cdef Py_ssize_t _chunk_rows(Geom* g, Py_ssize_t rows_k) noexcept nogil:
    # output rows (od, oh pairs) per column chunk
    cdef Py_ssize_t r = COL_BUDGET // (rows_k * g.OW)
    if r < 1:
        r = 1
    if r > g.OD * g.OH:
        r = g.OD * g.OH
    return r


cdef void _unfold(double* xc, Py_ssize_t x_cs, Geom* g, Py_ssize_t cig,
                  Py_ssize_t row0, Py_ssize_t nrows, double* cols, Py_ssize_t ld) noexcept nogil:
    # cols[(c, a, b, e), j*OW + ow] for output rows row0 .. row0+nrows, zeros in padding
    cdef Py_ssize_t c, a, b, e, j, od, oh, ow, i_d, i_h, off, wlo, whi, r = 0
    cdef double* dst
    cdef double* src
    for c in range(cig):
        for a in range(g.KD):
            for b in range(g.KH):
                for e in range(g.KW):
                    _valid(e, g.sw, g.pw, g.W, g.OW, &wlo, &whi)
                    off = e - g.pw
                    for j in range(nrows):
                        od = (row0 + j) // g.OH
                        oh = (row0 + j) % g.OH
                        dst = cols + r * ld + j * g.OW
                        i_d = _src(od, g.sd, a, g.pd, g.D)
                        i_h = _src(oh, g.sh, b, g.ph, g.H)
                        if i_d < 0 or i_h < 0:
                            memset(dst, 0, g.OW * sizeof(double))
                            continue
                        src = xc + c * x_cs + (i_d * g.H + i_h) * g.W
                        for ow in range(wlo):
                            dst[ow] = 0.0
                        if g.sw == 1:
                            for ow in range(wlo, whi):
                                dst[ow] = src[ow + off]
                        else:
                            for ow in range(wlo, whi):
                                dst[ow] = src[ow * g.sw + off]
                        for ow in range(whi, g.OW):
                            dst[ow] = 0.0
                    r += 1


cdef void _fold(double* gxc, Py_ssize_t x_cs, Geom* g, Py_ssize_t cig,
                Py_ssize_t row0, Py_ssize_t nrows, double* cols, Py_ssize_t ld) noexcept nogil:
    # scatter-add of _unfold's layout back into the input gradient
    cdef Py_ssize_t c, a, b, e, j, od, oh, ow, i_d, i_h, off, wlo, whi, r = 0
    cdef double* src
    cdef double* dst
    for c in range(cig):
        for a in range(g.KD):
            for b in range(g.KH):
                for e in range(g.KW):
                    _valid(e, g.sw, g.pw, g.W, g.OW, &wlo, &whi)
                    off = e - g.pw
                    for j in range(nrows):
                        od = (row0 + j) // g.OH
                        oh = (row0 + j) % g.OH
                        i_d = _src(od, g.sd, a, g.pd, g.D)
                        i_h = _src(oh, g.sh, b, g.ph, g.H)
                        if i_d < 0 or i_h < 0:
                            continue
                        src = cols + r * ld + j * g.OW
                        dst = gxc + c * x_cs + (i_d * g.H + i_h) * g.W
                        if g.sw == 1:
                            for ow in range(wlo, whi):
                                dst[ow + off] += src[ow]
                        else:
                            for ow in range(wlo, whi):
                                dst[ow * g.sw + off] += src[ow]
                    r += 1


cdef inline bint _depthwise(Py_ssize_t ci, Py_ssize_t co, Py_ssize_t cig, Py_ssize_t groups):
    return groups == ci and co == groups and cig == 1


def conv_forward(x, w, out_sp, stride, padding, groups):
    cdef double[:, :, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t N = xv.shape[0], Ci = xv.shape[1], Co = wv.shape[0], Cig = wv.shape[1]
    out = np.zeros((N, Co) + tuple(out_sp))
    cdef double[:, :, :, :, ::1] ov = out
    cdef Geom g = _geom(tuple(x.shape[2:]), tuple(out_sp), tuple(w.shape[2:]),
                        tuple(stride), tuple(padding))
    if _depthwise(Ci, Co, Cig, groups):
        _dw_forward(xv, wv, ov, &g)
        return out
    cdef Py_ssize_t G = groups, cog = Co // G
    cdef Py_ssize_t rows_k = Cig * g.KD * g.KH * g.KW
    cdef Py_ssize_t per = _chunk_rows(&g, rows_k)
    cdef Py_ssize_t ld = per * g.OW
    cdef Py_ssize_t vout = g.OD * g.OH * g.OW
    cdef Py_ssize_t x_cs = g.D * g.H * g.W
    cols_arr = np.empty(rows_k * ld)
    cdef double[::1] cols = cols_arr
    cdef Py_ssize_t n, grp, row0, nrows
    with nogil:
        for n in range(N):
            row0 = 0
            while row0 < g.OD * g.OH:
                nrows = per
                if row0 + nrows > g.OD * g.OH:
                    nrows = g.OD * g.OH - row0
                for grp in range(G):
                    _unfold(&xv[n, grp * Cig, 0, 0, 0], x_cs, &g, Cig, row0, nrows, &cols[0], ld)
                    _gemm(b'N', b'N', <int>cog, <int>(nrows * g.OW), <int>rows_k, 1.0,
                          &wv[grp * cog, 0, 0, 0, 0], <int>rows_k, &cols[0], <int>ld, 0.0,
                          &ov[n, grp * cog, 0, 0, 0] + row0 * g.OW, <int>vout)
                row0 += nrows
    return out


def conv_backward_input(gout, w, in_sp, stride, padding, groups):
    cdef double[:, :, :, :, ::1] gv = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[:, :, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t N = gv.shape[0], Co = wv.shape[0], Cig = wv.shape[1]
    cdef Py_ssize_t Ci = Cig * groups
    gx = np.zeros((N, Ci) + tuple(in_sp))
    cdef double[:, :, :, :, ::1] xv = gx
    cdef Geom g = _geom(tuple(in_sp), tuple(gout.shape[2:]), tuple(w.shape[2:]),
                        tuple(stride), tuple(padding))
    if _depthwise(Ci, Co, Cig, groups):
        _dw_backward_input(gv, wv, xv, &g)
        return gx
    cdef Py_ssize_t G = groups, cog = Co // G
    cdef Py_ssize_t rows_k = Cig * g.KD * g.KH * g.KW
    cdef Py_ssize_t per = _chunk_rows(&g, rows_k)
    cdef Py_ssize_t ld = per * g.OW
    cdef Py_ssize_t vout = g.OD * g.OH * g.OW
    cdef Py_ssize_t x_cs = g.D * g.H * g.W
    cols_arr = np.empty(rows_k * ld)
    cdef double[::1] cols = cols_arr
    cdef Py_ssize_t n, grp, row0, nrows
    with nogil:
        for n in range(N):
            row0 = 0
            while row0 < g.OD * g.OH:
                nrows = per
                if row0 + nrows > g.OD * g.OH:
                    nrows = g.OD * g.OH - row0
                for grp in range(G):
                    _gemm(b'T', b'N', <int>rows_k, <int>(nrows * g.OW), <int>cog, 1.0,
                          &wv[grp * cog, 0, 0, 0, 0], <int>rows_k,
                          &gv[n, grp * cog, 0, 0, 0] + row0 * g.OW, <int>vout, 0.0,
                          &cols[0], <int>ld)
                    _fold(&xv[n, grp * Cig, 0, 0, 0], x_cs, &g, Cig, row0, nrows, &cols[0], ld)
                row0 += nrows
    return gx


def conv_backward_weight(gout, x, ksize, stride, padding, groups):
    cdef double[:, :, :, :, ::1] gv = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[:, :, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t N = xv.shape[0], Ci = xv.shape[1], Co = gv.shape[1]
    cdef Py_ssize_t Cig = Ci // groups
    gw = np.zeros((Co, Cig) + tuple(ksize))
    cdef double[:, :, :, :, ::1] wv = gw
    cdef Geom g = _geom(tuple(x.shape[2:]), tuple(gout.shape[2:]), tuple(ksize),
                        tuple(stride), tuple(padding))
    if _depthwise(Ci, Co, Cig, groups):
        _dw_backward_weight(gv, xv, wv, &g)
        return gw
    cdef Py_ssize_t G = groups, cog = Co // G
    cdef Py_ssize_t rows_k = Cig * g.KD * g.KH * g.KW
    cdef Py_ssize_t per = _chunk_rows(&g, rows_k)
    cdef Py_ssize_t ld = per * g.OW
    cdef Py_ssize_t vout = g.OD * g.OH * g.OW
    cdef Py_ssize_t x_cs = g.D * g.H * g.W
    cols_arr = np.empty(rows_k * ld)
    cdef double[::1] cols = cols_arr
    cdef Py_ssize_t n, grp, row0, nrows
    with nogil:
        for n in range(N):
            row0 = 0
            while row0 < g.OD * g.OH:
                nrows = per
                if row0 + nrows > g.OD * g.OH:
                    nrows = g.OD * g.OH - row0
                for grp in range(G):
                    _unfold(&xv[n, grp * Cig, 0, 0, 0], x_cs, &g, Cig, row0, nrows, &cols[0], ld)
                    _gemm(b'N', b'T', <int>cog, <int>rows_k, <int>(nrows * g.OW), 1.0,
                          &gv[n, grp * cog, 0, 0, 0] + row0 * g.OW, <int>vout,
                          &cols[0], <int>ld, 1.0, &wv[grp * cog, 0, 0, 0, 0], <int>rows_k)
                row0 += nrows
    return gw


cdef void _dw_forward(double[:, :, :, :, ::1] x, double[:, :, :, :, ::1] w,
                      double[:, :, :, :, ::1] out, Geom* g) noexcept nogil:
    cdef Py_ssize_t n, c, a, b, e, od, oh, ow, i_d, i_h, off, wlo, whi
    cdef double tap
    cdef double* op
    cdef double* ip
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            for od in range(g.OD):
                for oh in range(g.OH):
                    op = &out[n, c, od, oh, 0]
                    for a in range(g.KD):
                        i_d = _src(od, g.sd, a, g.pd, g.D)
                        if i_d < 0:
                            continue
                        for b in range(g.KH):
                            i_h = _src(oh, g.sh, b, g.ph, g.H)
                            if i_h < 0:
                                continue
                            ip = &x[n, c, i_d, i_h, 0]
                            for e in range(g.KW):
                                _valid(e, g.sw, g.pw, g.W, g.OW, &wlo, &whi)
                                tap = w[c, 0, a, b, e]
                                off = e - g.pw
                                if g.sw == 1:
                                    for ow in range(wlo, whi):
                                        op[ow] += tap * ip[ow + off]
                                else:
                                    for ow in range(wlo, whi):
                                        op[ow] += tap * ip[ow * g.sw + off]


cdef void _dw_backward_input(double[:, :, :, :, ::1] gout, double[:, :, :, :, ::1] w,
                             double[:, :, :, :, ::1] gx, Geom* g) noexcept nogil:
    cdef Py_ssize_t n, c, a, b, e, od, oh, ow, i_d, i_h, off, wlo, whi
    cdef double tap
    cdef double* gp
    cdef double* xp
    for n in range(gx.shape[0]):
        for c in range(gx.shape[1]):
            for od in range(g.OD):
                for oh in range(g.OH):
                    gp = &gout[n, c, od, oh, 0]
                    for a in range(g.KD):
                        i_d = _src(od, g.sd, a, g.pd, g.D)
                        if i_d < 0:
                            continue
                        for b in range(g.KH):
                            i_h = _src(oh, g.sh, b, g.ph, g.H)
                            if i_h < 0:
                                continue
                            xp = &gx[n, c, i_d, i_h, 0]
                            for e in range(g.KW):
                                _valid(e, g.sw, g.pw, g.W, g.OW, &wlo, &whi)
                                tap = w[c, 0, a, b, e]
                                off = e - g.pw
                                if g.sw == 1:
                                    for ow in range(wlo, whi):
                                        xp[ow + off] += tap * gp[ow]
                                else:
                                    for ow in range(wlo, whi):
                                        xp[ow * g.sw + off] += tap * gp[ow]


cdef void _dw_backward_weight(double[:, :, :, :, ::1] gout, double[:, :, :, :, ::1] x,
                              double[:, :, :, :, ::1] gw, Geom* g) noexcept nogil:
    cdef Py_ssize_t n, c, a, b, e, od, oh, ow, i_d, i_h, off, wlo, whi
    cdef double acc0, acc1, acc2, acc3
    cdef double* gp
    cdef double* xp
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            for od in range(g.OD):
                for oh in range(g.OH):
                    gp = &gout[n, c, od, oh, 0]
                    for a in range(g.KD):
                        i_d = _src(od, g.sd, a, g.pd, g.D)
                        if i_d < 0:
                            continue
                        for b in range(g.KH):
                            i_h = _src(oh, g.sh, b, g.ph, g.H)
                            if i_h < 0:
                                continue
                            xp = &x[n, c, i_d, i_h, 0]
                            for e in range(g.KW):
                                _valid(e, g.sw, g.pw, g.W, g.OW, &wlo, &whi)
                                off = e - g.pw
                                # four interleaved partial sums, combined in a fixed order
                                acc0 = 0.0
                                acc1 = 0.0
                                acc2 = 0.0
                                acc3 = 0.0
                                if g.sw == 1:
                                    ow = wlo
                                    while ow + 3 < whi:
                                        acc0 += gp[ow] * xp[ow + off]
                                        acc1 += gp[ow + 1] * xp[ow + 1 + off]
                                        acc2 += gp[ow + 2] * xp[ow + 2 + off]
                                        acc3 += gp[ow + 3] * xp[ow + 3 + off]
                                        ow += 4
                                    while ow < whi:
                                        acc0 += gp[ow] * xp[ow + off]
                                        ow += 1
                                else:
                                    for ow in range(wlo, whi):
                                        acc0 += gp[ow] * xp[ow * g.sw + off]
                                gw[c, 0, a, b, e] += (acc0 + acc1) + (acc2 + acc3)
