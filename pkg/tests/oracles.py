"""Independent reference implementations used by the tests.

Everything here is written with explicit Python loops over plain numpy
arrays, sharing no code with the package beyond reading parameter arrays.
Slow by design; only run on tiny shapes.
"""

import itertools
import math

import numpy as np

LEAKY = 0.01
NORM_EPS = 1e-5


def _grid(shape):
    return itertools.product(*[range(n) for n in shape])


def conv(x, w, b=None, stride=1, pad=0, groups=1):
    """Direct convolution: x ``N x C x sp``, w ``O x C/groups x k``."""
    n_b, c_in = x.shape[:2]
    sp = x.shape[2:]
    rank = len(sp)
    stride = (stride,) * rank if np.isscalar(stride) else tuple(stride)
    pad = (pad,) * rank if np.isscalar(pad) else tuple(pad)
    c_out, cig = w.shape[:2]
    k = w.shape[2:]
    cog = c_out // groups
    out_sp = tuple((sp[a] + 2 * pad[a] - k[a]) // stride[a] + 1 for a in range(rank))
    out = np.zeros((n_b, c_out) + out_sp)
    for n in range(n_b):
        for o in range(c_out):
            g = o // cog
            for pos in _grid(out_sp):
                acc = 0.0 if b is None else float(b[o])
                for ci in range(cig):
                    c = g * cig + ci
                    for kk in _grid(k):
                        idx = tuple(pos[a] * stride[a] - pad[a] + kk[a] for a in range(rank))
                        if all(0 <= idx[a] < sp[a] for a in range(rank)):
                            acc += x[(n, c) + idx] * w[(o, ci) + kk]
                out[(n, o) + pos] = acc
    return out


def transposed_conv(x, w, b=None, stride=2, pad=1, out_pad=1, groups=1):
    """Scatter-accumulate: every input voxel stamps its kernel into the output."""
    n_b, c_in = x.shape[:2]
    sp = x.shape[2:]
    rank = len(sp)
    stride = (stride,) * rank if np.isscalar(stride) else tuple(stride)
    pad = (pad,) * rank if np.isscalar(pad) else tuple(pad)
    out_pad = (out_pad,) * rank if np.isscalar(out_pad) else tuple(out_pad)
    k = w.shape[2:]
    cog = w.shape[1]
    cig = c_in // groups
    c_out = cog * groups
    out_sp = tuple((sp[a] - 1) * stride[a] - 2 * pad[a] + k[a] + out_pad[a] for a in range(rank))
    out = np.zeros((n_b, c_out) + out_sp)
    for n in range(n_b):
        for c in range(c_in):
            g = c // cig
            for pos in _grid(sp):
                v = x[(n, c) + pos]
                for oc in range(cog):
                    for kk in _grid(k):
                        idx = tuple(pos[a] * stride[a] - pad[a] + kk[a] for a in range(rank))
                        if all(0 <= idx[a] < out_sp[a] for a in range(rank)):
                            out[(n, g * cog + oc) + idx] += v * w[(c, oc) + kk]
    if b is not None:
        for o in range(c_out):
            out[:, o] += b[o]
    return out


def pool(x, kind, size, stride):
    sp = x.shape[2:]
    rank = len(sp)
    size = (size,) * rank if np.isscalar(size) else tuple(size)
    stride = (stride,) * rank if np.isscalar(stride) else tuple(stride)
    out_sp = tuple((sp[a] - size[a]) // stride[a] + 1 for a in range(rank))
    out = np.zeros(x.shape[:2] + out_sp)
    for n, c in _grid(x.shape[:2]):
        for pos in _grid(out_sp):
            vals = [x[(n, c) + tuple(pos[a] * stride[a] + kk[a] for a in range(rank))]
                    for kk in _grid(size)]
            out[(n, c) + pos] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def upsample(x, factor):
    sp = x.shape[2:]
    factor = (factor,) * len(sp) if np.isscalar(factor) else tuple(factor)
    out_sp = tuple(n * f for n, f in zip(sp, factor))
    out = np.zeros(x.shape[:2] + out_sp)
    for n, c in _grid(x.shape[:2]):
        for pos in _grid(out_sp):
            out[(n, c) + pos] = x[(n, c) + tuple(p // f for p, f in zip(pos, factor))]
    return out


def sigmoid(v):
    return np.vectorize(lambda t: 1.0 / (1.0 + math.exp(-t)))(v)


def leaky(v):
    return np.where(v > 0, v, LEAKY * v)


def instance_norm(x, gamma, beta):
    out = np.zeros_like(x)
    for n, c in _grid(x.shape[:2]):
        vals = x[n, c].ravel().tolist()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        out[n, c] = gamma[c] * (x[n, c] - mu) / math.sqrt(var + NORM_EPS) + beta[c]
    return out


def unit(x, u, act=True):
    """Conv unit from its raw arrays: conv, then norm if present, then leaky ReLU."""
    groups = u.desc.groups
    pad = tuple(k // 2 for k in u.desc.kernel)
    y = conv(x, u.weight.data, u.bias.data, 1, pad, groups)
    if u.gamma is not None:
        y = instance_norm(y, u.gamma.data, u.beta.data)
    if act and u.act is not None:
        y = leaky(y)
    return y


def gate(features, lin):
    """sigmoid(W * mean + b), one scalar per (sample, channel)."""
    n_b, c = features.shape[:2]
    w = lin.weight.data.reshape(c, c)
    out = np.zeros((n_b, c) + (1,) * (features.ndim - 2))
    for n in range(n_b):
        means = [features[n, j].mean() for j in range(c)]
        for i in range(c):
            z = lin.bias.data[i] + sum(w[i, j] * means[j] for j in range(c))
            out[(n, i) + (0,) * (features.ndim - 2)] = 1.0 / (1.0 + math.exp(-z))
    return out


def dmrc(x, p):
    """Multi-resolution block written out step by step."""
    f1 = unit(x, p.conv_main)                                   # full-resolution path
    low = pool(x, "avg", p.pool, p.pool)
    f2 = upsample(unit(low, p.conv_low), p.pool)                # low-resolution path
    f3 = unit(x, p.conv_pix, act=False)                         # pixel-wise path
    fs = f2 + f3
    f = f1 * sigmoid(fs)                                        # spatial gate
    f_prime = unit(f, p.conv_post)
    g = gate(f_prime, p.gate_linear)                            # channel gate
    return f_prime * g


def dmsc(x, p):
    """Multi-scale block written out step by step."""
    f1 = unit(x, p.conv_a1)
    xb = x if p.proj_b is None else unit(x, p.proj_b, act=False)
    f2 = unit(xb, p.conv_b1)
    f1p = unit(f1, p.conv_a2)
    f2p = unit(f2, p.conv_b2)
    f = np.concatenate([f1p, f2p], axis=1)
    g = gate(f, p.gate_linear)
    return unit(f * g, p.reduce, act=False)


# -- metrics ---------------------------------------------------------------------------


def dsc(pred, gt):
    p = [tuple(i) for i in np.argwhere(pred)]
    g = [tuple(i) for i in np.argwhere(gt)]
    if not p and not g:
        return 1.0
    inter = len(set(p) & set(g))
    return 2.0 * inter / (len(p) + len(g))


def surface_points(mask):
    mask = np.asarray(mask, dtype=bool)
    pts = []
    for idx in _grid(mask.shape):
        if not mask[idx]:
            continue
        boundary = False
        for axis in range(mask.ndim):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < mask.shape[axis] or not mask[tuple(nb)]:
                    boundary = True
        if boundary:
            pts.append(idx)
    return np.array(pts, dtype=np.float64).reshape(-1, mask.ndim)


def _percentile(values, q):
    vals = sorted(values)
    pos = q / 100.0 * (len(vals) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(vals) - 1)
    return vals[lo] + (vals[hi] - vals[lo]) * (pos - lo)


def surface_distances(pred, gt, spacing):
    sp = surface_points(pred) * np.asarray(spacing)
    sg = surface_points(gt) * np.asarray(spacing)
    d = np.sqrt(((sp[:, None, :] - sg[None, :, :]) ** 2).sum(-1))
    return list(d.min(axis=1)) + list(d.min(axis=0))


def hd95(pred, gt, spacing):
    if not np.any(pred) or not np.any(gt):
        return None
    return _percentile(surface_distances(pred, gt, spacing), 95)


def hausdorff(pred, gt, spacing):
    if not np.any(pred) or not np.any(gt):
        return None
    return max(surface_distances(pred, gt, spacing))


def wilcoxon_p(a, b):
    """Two-sided p by enumerating every sign assignment of the ranked differences."""
    d = [y - x for x, y in zip(a, b) if y - x != 0]
    n = len(d)
    mags = [abs(v) for v in d]
    order = sorted(range(n), key=lambda i: mags[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and mags[order[j + 1]] == mags[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2.0 + 1.0
        i = j + 1
    w_plus = sum(r for r, v in zip(ranks, d) if v > 0)
    w_minus = sum(r for r, v in zip(ranks, d) if v < 0)
    w = min(w_plus, w_minus)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        t = sum(r for r, s in zip(ranks, signs) if s)
        if t <= w + 1e-9:
            hits += 1
    return w, min(1.0, 2.0 * hits / 2 ** n)
