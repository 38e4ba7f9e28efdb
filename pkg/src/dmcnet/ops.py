"""Differentiable tensor operations.

Spatial ops accept 2-D (``N x C x H x W``) or 3-D (``N x C x H x W x D``)
feature maps. Convolutions are routed through the active kernel backend (see
:mod:`dmcnet._backend`) after being lifted to a canonical 3-D form.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _backend
from .errors import ConfigurationError, DimensionError, GeometryError
from .tensor import Tensor, as_tensor, note_branch, record

__all__ = [
    "ConvDescriptor",
    "conv_nd",
    "transposed_conv_nd",
    "pool_nd",
    "upsample_nearest_nd",
    "activation",
    "sigmoid",
    "relu",
    "leaky_relu",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "concat_channels",
    "slice_channels",
    "global_avg_pool",
    "instance_norm",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
]


def _per_axis(value, rank, what):
    if np.isscalar(value):
        return (int(value),) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise ConfigurationError(f"{what} needs {rank} entries, got {value}")
    return value


def _spatial_rank(x, op):
    rank = x.ndim - 2
    if rank not in (2, 3):
        raise DimensionError(f"{op}: expected N x C x 2-D or 3-D input, got shape {x.shape}")
    return rank


@dataclass(frozen=True)
class ConvDescriptor:
    """Geometry of one convolution layer."""

    spatial_rank: int
    kernel: tuple
    stride: tuple
    padding: tuple
    groups: int = 1
    has_bias: bool = True

    @classmethod
    def same(cls, rank, kernel, groups=1, has_bias=True):
        """Stride-1 conv whose zero padding keeps spatial extents unchanged."""
        k = _per_axis(kernel, rank, "kernel")
        if any(v % 2 == 0 for v in k):
            raise ConfigurationError(f"'same' padding needs odd kernels, got {k}")
        return cls(rank, k, (1,) * rank, tuple(v // 2 for v in k), groups, has_bias)

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ConfigurationError(f"unsupported spatial rank {self.spatial_rank}")
        for field in ("kernel", "stride", "padding"):
            value = getattr(self, field)
            if len(value) != self.spatial_rank:
                raise ConfigurationError(f"{field} {value} does not match rank {self.spatial_rank}")
        if self.groups < 1:
            raise ConfigurationError(f"groups must be positive, got {self.groups}")

    def check_channels(self, c_in, c_out):
        if c_in % self.groups or c_out % self.groups:
            raise ConfigurationError(
                f"channels {c_in}->{c_out} not divisible by groups={self.groups}"
            )

    def is_depthwise(self, c_in, c_out):
        return self.groups == c_in == c_out

    def weight_shape(self, c_in, c_out):
        return (c_out, c_in // self.groups) + tuple(self.kernel)

    def output_extent(self, spatial):
        return tuple(
            (n + 2 * p - k) // s + 1
            for n, p, k, s in zip(spatial, self.padding, self.kernel, self.stride)
        )


# -- convolution -------------------------------------------------------------


def _lift(rank, arr):
    # 2-D arrays get a singleton leading spatial axis
    return arr[:, :, None] if rank == 2 else arr


def _lift_geom(rank, vals, fill):
    return (fill,) + tuple(vals) if rank == 2 else tuple(vals)


def _drop(rank, arr):
    return arr[:, :, 0] if rank == 2 else arr


def _check_conv(x, weight, bias, groups, op):
    if weight.ndim != x.ndim:
        raise DimensionError(
            f"{op}: weight rank {weight.ndim} does not match input rank {x.ndim}"
        )
    c_in = x.shape[1]
    if groups < 1 or c_in % groups:
        raise DimensionError(
            f"{op}: axis 1 (channels) has {c_in} input channels, not divisible by groups={groups}"
        )


def conv_nd(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped N-d cross-correlation with symmetric zero padding.

    ``weight`` is ``[C_out, C_in // groups, *kernel]``. Output extent per axis
    is ``(n + 2p - k) // s + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    rank = _spatial_rank(x, "conv_nd")
    _check_conv(x, weight, bias, groups, "conv_nd")
    c_in = x.shape[1]
    c_out = weight.shape[0]
    if weight.shape[1] * groups != c_in:
        raise DimensionError(
            f"conv_nd: axis 1 (channels) has {c_in} input channels but weight expects "
            f"{weight.shape[1]} x {groups} groups"
        )
    if c_out % groups:
        raise DimensionError(f"conv_nd: axis 0 of weight ({c_out}) not divisible by groups={groups}")
    stride = _per_axis(stride, rank, "stride")
    padding = _per_axis(padding, rank, "padding")
    ksize = weight.shape[2:]
    out_sp = []
    for axis, (n, p, k, s) in enumerate(zip(x.shape[2:], padding, ksize, stride)):
        extent = (n + 2 * p - k) // s + 1
        if n + 2 * p - k < 0 or extent < 1:
            raise GeometryError(
                f"conv_nd: spatial axis {axis + 2} yields empty output "
                f"(extent {n}, kernel {k}, padding {p}, stride {s})"
            )
        out_sp.append(extent)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv_nd: bias shape {bias.shape} != ({c_out},)")

    kern = _backend.kernels()
    s3 = _lift_geom(rank, stride, 1)
    p3 = _lift_geom(rank, padding, 0)
    o3 = _lift_geom(rank, out_sp, 1)
    x5 = _lift(rank, x.data)
    w5 = _lift(rank, weight.data)
    out = kern.conv_forward(x5, w5, o3, s3, p3, groups)
    if bias is not None:
        out += bias.data.reshape((1, c_out) + (1,) * 3)
    out = _drop(rank, out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g5 = np.ascontiguousarray(_lift(rank, g))
        gx = gw = None
        if x.requires_grad:
            gx = _drop(rank, kern.conv_backward_input(g5, w5, x5.shape[2:], s3, p3, groups))
        if weight.requires_grad:
            gw = kern.conv_backward_weight(g5, x5, w5.shape[2:], s3, p3, groups)
            gw = gw[:, :, 0] if rank == 2 else gw
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0,) + tuple(range(2, g.ndim))) if bias.requires_grad else None
        return gx, gw, gb

    return record("conv_nd", out, parents, vjp)


def transposed_conv_nd(x, weight, bias=None, stride=2, padding=1, output_padding=1, groups=1):
    """Adjoint of :func:`conv_nd` w.r.t. its input (a.k.a. deconvolution).

    ``weight`` is ``[C_in, C_out // groups, *kernel]``. Output extent per axis
    is ``(n - 1) * s - 2p + k + output_padding``; the defaults double the
    extent for a 3-kernel.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    rank = _spatial_rank(x, "transposed_conv_nd")
    _check_conv(x, weight, bias, groups, "transposed_conv_nd")
    c_in = x.shape[1]
    if weight.shape[0] != c_in:
        raise DimensionError(
            f"transposed_conv_nd: axis 1 (channels) has {c_in} channels, weight expects {weight.shape[0]}"
        )
    c_out = weight.shape[1] * groups
    stride = _per_axis(stride, rank, "stride")
    padding = _per_axis(padding, rank, "padding")
    output_padding = _per_axis(output_padding, rank, "output_padding")
    ksize = weight.shape[2:]
    out_sp = []
    for axis, (n, s, p, k, op) in enumerate(zip(x.shape[2:], stride, padding, ksize, output_padding)):
        if op >= s:
            raise GeometryError(f"transposed_conv_nd: output_padding {op} must be < stride {s}")
        extent = (n - 1) * s - 2 * p + k + op
        if extent < 1:
            raise GeometryError(f"transposed_conv_nd: spatial axis {axis + 2} yields empty output")
        # the forward conv must map the output back onto the input extent exactly
        if (extent + 2 * p - k) // s + 1 != n:
            raise GeometryError(
                f"transposed_conv_nd: spatial axis {axis + 2} is not invertible "
                f"(extent {n}, kernel {k}, stride {s}, padding {p})"
            )
        out_sp.append(extent)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"transposed_conv_nd: bias shape {bias.shape} != ({c_out},)")

    kern = _backend.kernels()
    s3 = _lift_geom(rank, stride, 1)
    p3 = _lift_geom(rank, padding, 0)
    o3 = _lift_geom(rank, out_sp, 1)
    x5 = _lift(rank, x.data)
    w5 = _lift(rank, weight.data)
    out = kern.conv_backward_input(np.ascontiguousarray(x5), w5, o3, s3, p3, groups)
    if bias is not None:
        out += bias.data.reshape((1, c_out) + (1,) * 3)
    out = _drop(rank, out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g5 = np.ascontiguousarray(_lift(rank, g))
        gx = gw = None
        if x.requires_grad:
            gx = _drop(rank, kern.conv_forward(g5, w5, x5.shape[2:], s3, p3, groups))
        if weight.requires_grad:
            # roles swap: the upstream grad plays the conv input, x the conv output grad
            gw = kern.conv_backward_weight(np.ascontiguousarray(x5), g5, w5.shape[2:], s3, p3, groups)
            gw = gw[:, :, 0] if rank == 2 else gw
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0,) + tuple(range(2, g.ndim))) if bias.requires_grad else None
        return gx, gw, gb

    return record("transposed_conv_nd", out, parents, vjp)


# -- resampling ----------------------------------------------------------------


def _window_offsets(fsize):
    return list(np.ndindex(*fsize))


def _window_slices(offset, stride, out_sp):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_sp))


def pool_nd(x, kind, filter, stride):
    """Average or max pooling without padding.

    Every spatial extent must be divisible by its stride. Max pooling routes
    gradient to the first maximum in window scan order.
    """
    x = as_tensor(x)
    rank = _spatial_rank(x, "pool_nd")
    fsize = _per_axis(filter, rank, "filter")
    stride = _per_axis(stride, rank, "stride")
    if kind not in ("avg", "max"):
        raise ConfigurationError(f"unknown pooling kind {kind!r}")
    spatial = x.shape[2:]
    for axis, (n, f, s) in enumerate(zip(spatial, fsize, stride)):
        if s < 1 or f < 1:
            raise GeometryError(f"pool_nd: filter and stride must be positive on axis {axis + 2}")
        if n % s or f > n:
            raise GeometryError(
                f"pool_nd: spatial axis {axis + 2} has extent {n}, not divisible by stride {s} "
                f"(filter {f})"
            )
    out_sp = tuple((n - f) // s + 1 for n, f, s in zip(spatial, fsize, stride))
    axes = tuple(range(2, x.ndim))
    win = sliding_window_view(x.data, fsize, axis=axes)
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    win = win.reshape(x.shape[:2] + out_sp + (-1,))
    offsets = _window_offsets(fsize)
    if kind == "avg":
        out = win.mean(axis=-1)
        count = float(len(offsets))

        def vjp(g):
            gx = np.zeros_like(x.data)
            share = g / count
            for off in offsets:
                gx[(slice(None), slice(None)) + _window_slices(off, stride, out_sp)] += share
            return (gx,)

    else:
        arg = win.argmax(axis=-1)
        note_branch(arg)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def vjp(g):
            gx = np.zeros_like(x.data)
            for idx, off in enumerate(offsets):
                gx[(slice(None), slice(None)) + _window_slices(off, stride, out_sp)] += np.where(
                    arg == idx, g, 0.0
                )
            return (gx,)

    return record(f"{kind}_pool_nd", np.ascontiguousarray(out), (x,), vjp)


def upsample_nearest_nd(x, factor):
    """Replicate each value ``factor`` times per spatial axis."""
    x = as_tensor(x)
    rank = _spatial_rank(x, "upsample_nearest_nd")
    factor = _per_axis(factor, rank, "factor")
    if any(f < 1 for f in factor):
        raise ConfigurationError(f"upsample factors must be >= 1, got {factor}")
    out = x.data
    for axis, f in enumerate(factor):
        if f > 1:
            out = np.repeat(out, f, axis=axis + 2)

    def vjp(g):
        shape = list(g.shape[:2])
        for n, f in zip(x.shape[2:], factor):
            shape += [n, f]
        blocks = g.reshape(shape)
        return (blocks.sum(axis=tuple(range(3, 3 + 2 * rank, 2))),)

    return record("upsample_nearest_nd", out, (x,), vjp)


# -- elementwise ---------------------------------------------------------------


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", out, (x,), vjp)


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    mask = x.data > 0
    note_branch(mask)
    out = np.where(mask, x.data, slope * x.data)

    def vjp(g):
        return (np.where(mask, g, slope * g),)

    return record("leaky_relu", out, (x,), vjp)


def relu(x):
    return leaky_relu(x, slope=0.0)


def activation(x, kind, slope=0.01):
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ConfigurationError(f"unknown activation {kind!r}")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("div", out, (a, b), vjp)


def elementwise(a, b, kind):
    """``a (+|*) b`` where ``b`` matches ``a`` or is a per-channel gate ``N x C x 1...``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.shape != a.shape:
        gate_ok = (
            b.ndim == a.ndim
            and a.ndim >= 2
            and b.shape[1] == a.shape[1]
            and b.shape[0] in (1, a.shape[0])
            and all(s == 1 for s in b.shape[2:])
        )
        if not gate_ok:
            raise DimensionError(
                f"elementwise {kind}: shape {b.shape} is neither {a.shape} nor a channel gate"
            )
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ConfigurationError(f"unknown elementwise kind {kind!r}")


# -- channel bookkeeping -----------------------------------------------------------


def concat_channels(*tensors):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise DimensionError(
                f"concat_channels: shape {t.shape} does not match {ref.shape} outside axis 1"
            )
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def vjp(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record("concat_channels", out, tuple(tensors), vjp)


def slice_channels(x, start, stop):
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_channels: [{start}, {stop}) outside 0..{x.shape[1]}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return record("slice_channels", x.data[:, start:stop], (x,), vjp)


# -- reductions & normalisation -----------------------------------------------------


def global_avg_pool(x):
    """Per-channel spatial mean, keeping singleton spatial axes."""
    x = as_tensor(x)
    axes = tuple(range(2, x.ndim))
    count = float(np.prod(x.shape[2:]))
    out = x.data.mean(axis=axes, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return record("global_avg_pool", out, (x,), vjp)


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel standardisation followed by a channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"instance_norm: affine params must have shape ({c},)")
    axes = tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = float(np.prod(x.shape[2:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def vjp(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv_std * (dxhat - s1 / m - xhat * (s2 / m))
        red = (0,) + axes
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return record("instance_norm", out, (x, gamma, beta), vjp)


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out, dtype=np.float64), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def log_softmax(x, axis=1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (x,), vjp)


def softmax(x, axis=1):
    x = as_tensor(x)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), vjp)
