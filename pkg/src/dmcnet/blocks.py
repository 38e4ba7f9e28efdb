"""Shape-preserving convolution blocks: plain conv, DMRC and DMSC.

DMRC (dynamic multi-resolution conv) fuses a full-resolution 3-kernel path, an
average-pooled 3-kernel path upsampled back by nearest neighbour, and a
pixel-wise 1-kernel path. The pooled and pixel paths are summed and squashed
into a spatial sigmoid gate on the full-resolution path; a further 3-kernel
conv follows and a global-average-pool channel gate recalibrates its output.

DMSC (dynamic multi-scale conv) runs two depth-2 paths, kernel 3 and kernel 5
(or 7), concatenates them, applies a channel gate and reduces back to
``c_out`` channels with a 1-kernel conv. In the lightweight form the large
kernel path uses depthwise convs.

Every block maps ``c_in -> c_out`` at its entry convs; later convs keep
``c_out``. Each conv inside a path is followed by instance norm and leaky ReLU
except the pixel path (norm only), gate linears (sigmoid only) and the DMSC
reduce (bare). ``norm=False`` drops every norm layer.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigurationError, GeometryError
from .tensor import Tensor

LEAKY_SLOPE = 0.01
GATE_INIT_SCALE = 0.1


@dataclass
class LayerRecord:
    """Topology entry used by the complexity counter.

    ``macs`` are true multiply-accumulates; ``macs_out`` counts one
    ``C_in / groups * prod(kernel)`` MAC per output element, which differs
    only for transposed convs.
    """

    name: str
    kind: str
    params: int = 0
    macs: int = 0
    macs_out: int = 0
    elems: int = 0
    bias_elems: int = 0


def _as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def he_uniform(rng, shape, scale=1.0):
    """He/Kaiming-uniform init: U(-b, b) with b = scale * sqrt(6 / fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    bound = scale * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _prod(values):
    return int(np.prod(values)) if len(values) else 1


class ConvUnit:
    """Conv followed by optional instance norm and optional activation."""

    def __init__(self, c_in, c_out, rank, kernel, rng=None, *, groups=1, norm=True,
                 act="leaky_relu", init_scale=1.0, transposed=False):
        self.c_in = c_in
        self.c_out = c_out
        self.rank = rank
        self.transposed = transposed
        if transposed:
            k = (kernel,) * rank
            self.desc = ops.ConvDescriptor(rank, k, (2,) * rank, (kernel // 2,) * rank, groups)
            wshape = (c_in, c_out // groups) + k
        else:
            self.desc = ops.ConvDescriptor.same(rank, kernel, groups=groups)
            wshape = self.desc.weight_shape(c_in, c_out)
        self.desc.check_channels(c_in, c_out)
        self.init_scale = init_scale
        # zero pages stay virtual until reset(), so topology-only models are cheap
        self.weight = Tensor._wrap(np.zeros(wshape))
        self.bias = Tensor._wrap(np.zeros(c_out))
        self.gamma = Tensor(np.ones(c_out)) if norm else None
        self.beta = Tensor._wrap(np.zeros(c_out)) if norm else None
        self.act = act
        if rng is not None:
            self.reset(rng)

    def reset(self, rng):
        if self.transposed:
            # fan-in of a transposed conv is taken over its (C_in, kernel) axes
            fan = self.weight.shape[0] * _prod(self.weight.shape[2:])
            bound = self.init_scale * np.sqrt(6.0 / fan)
            self.weight.data[...] = rng.uniform(-bound, bound, size=self.weight.shape)
        else:
            self.weight.data[...] = he_uniform(rng, self.weight.shape, self.init_scale)
        self.bias.data[...] = 0.0
        if self.gamma is not None:
            self.gamma.data[...] = 1.0
            self.beta.data[...] = 0.0

    def __call__(self, x):
        d = self.desc
        if self.transposed:
            y = ops.transposed_conv_nd(x, self.weight, self.bias, d.stride, d.padding, 1, d.groups)
        else:
            y = ops.conv_nd(x, self.weight, self.bias, d.stride, d.padding, d.groups)
        if self.gamma is not None:
            y = ops.instance_norm(y, self.gamma, self.beta)
        if self.act is not None:
            y = ops.activation(y, self.act, LEAKY_SLOPE)
        return y

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias
        if self.gamma is not None:
            yield f"{prefix}.norm.gamma", self.gamma
            yield f"{prefix}.norm.beta", self.beta

    def param_count(self):
        return sum(t.size for _, t in self.named_parameters(""))

    def out_spatial(self, spatial):
        if self.transposed:
            return tuple(2 * n for n in spatial)
        return tuple(spatial)

    def describe(self, prefix, spatial):
        out_sp = self.out_spatial(spatial)
        out_elems = self.c_out * _prod(out_sp)
        kvol = _prod(self.desc.kernel)
        per_out = self.c_in // self.desc.groups * kvol
        if self.transposed:
            macs = _prod(spatial) * self.c_in * (self.c_out // self.desc.groups) * kvol
            kind = "conv_transpose"
        else:
            macs = out_elems * per_out
            kind = "conv"
        rows = [
            LayerRecord(
                prefix,
                kind,
                params=self.weight.size + self.bias.size,
                macs=macs,
                macs_out=out_elems * per_out,
                bias_elems=out_elems,
            )
        ]
        if self.gamma is not None:
            rows.append(LayerRecord(f"{prefix}.norm", "norm", params=2 * self.c_out, elems=out_elems))
        if self.act is not None:
            rows.append(LayerRecord(f"{prefix}.{self.act}", "act", elems=out_elems))
        return rows, out_sp


def _gate_unit(channels, rank, rng):
    return ConvUnit(channels, channels, rank, 1, rng, norm=False, act=None,
                    init_scale=GATE_INIT_SCALE)


def channel_gate(features, gate_linear):
    """G = sigmoid(linear(global_avg_pool(F))), shape ``N x C x 1...``."""
    pooled = ops.global_avg_pool(features)
    return ops.sigmoid(gate_linear(pooled))


def _gate_records(prefix, gate_linear, channels, spatial):
    rank = len(spatial)
    rows = [LayerRecord(f"{prefix}.gap", "gap", elems=channels * _prod(spatial))]
    lin, _ = gate_linear.describe(f"{prefix}.linear", (1,) * rank)
    rows += lin
    rows.append(LayerRecord(f"{prefix}.sigmoid", "act", elems=channels))
    rows.append(LayerRecord(f"{prefix}.mul", "mul", elems=channels * _prod(spatial)))
    return rows


class Block:
    kind = None

    def named_parameters(self, prefix):
        for attr in self._units:
            unit = getattr(self, attr)
            if unit is not None:
                yield from unit.named_parameters(f"{prefix}.{attr}")

    def units(self):
        return [getattr(self, a) for a in self._units if getattr(self, a) is not None]

    def reset(self, rng):
        for unit in self.units():
            unit.reset(rng)

    def param_count(self):
        return sum(u.param_count() for u in self.units())


class PlainBlock(Block):
    """A single 3-kernel conv + norm + leaky ReLU."""

    kind = "plain_conv"
    _units = ("conv",)

    def __init__(self, c_in, c_out, rank, rng, norm=True):
        self.c_in, self.c_out, self.rank = c_in, c_out, rank
        self.conv = ConvUnit(c_in, c_out, rank, 3, rng, norm=norm)

    def __call__(self, x):
        return self.conv(x)

    def describe(self, prefix, spatial):
        return self.conv.describe(f"{prefix}.conv", spatial)


@dataclass
class DmrcParams(Block):
    conv_main: ConvUnit
    conv_low: ConvUnit
    conv_pix: ConvUnit
    conv_post: ConvUnit
    gate_linear: ConvUnit
    pool: tuple
    c_in: int = 0
    c_out: int = 0
    rank: int = 2
    kind: str = field(default="dmrc", init=False)
    _units = ("conv_main", "conv_low", "conv_pix", "conv_post", "gate_linear")

    def __call__(self, x):
        return dmrc_forward(x, self)

    def check_geometry(self, spatial):
        for axis, (n, f) in enumerate(zip(spatial, self.pool)):
            if n % f:
                raise GeometryError(
                    f"DMRC: spatial axis {axis + 2} has extent {n}, not divisible by pool {f}"
                )

    def describe(self, prefix, spatial):
        self.check_geometry(spatial)
        low_sp = tuple(n // f for n, f in zip(spatial, self.pool))
        vol = _prod(spatial)
        c = self.c_out
        rows, _ = self.conv_main.describe(f"{prefix}.conv_main", spatial)
        rows.append(LayerRecord(f"{prefix}.avg_pool", "pool", elems=self.c_in * _prod(low_sp)))
        low, _ = self.conv_low.describe(f"{prefix}.conv_low", low_sp)
        rows += low
        rows.append(LayerRecord(f"{prefix}.upsample", "upsample", elems=c * vol))
        pix, _ = self.conv_pix.describe(f"{prefix}.conv_pix", spatial)
        rows += pix
        rows.append(LayerRecord(f"{prefix}.fuse_add", "add", elems=c * vol))
        rows.append(LayerRecord(f"{prefix}.spatial_sigmoid", "act", elems=c * vol))
        rows.append(LayerRecord(f"{prefix}.spatial_mul", "mul", elems=c * vol))
        post, _ = self.conv_post.describe(f"{prefix}.conv_post", spatial)
        rows += post
        rows += _gate_records(f"{prefix}.gate", self.gate_linear, c, spatial)
        return rows, tuple(spatial)


def dmrc_forward(x, p):
    """Dynamic multi-resolution conv; output ``N x c_out x spatial(x)``."""
    p.check_geometry(x.shape[2:])
    f1 = p.conv_main(x)
    low = ops.pool_nd(x, "avg", p.pool, p.pool)
    f2 = ops.upsample_nearest_nd(p.conv_low(low), p.pool)
    f3 = p.conv_pix(x)
    fs = ops.add(f2, f3)
    fused = ops.mul(f1, ops.sigmoid(fs))
    f_post = p.conv_post(fused)
    gate = channel_gate(f_post, p.gate_linear)
    return ops.elementwise(f_post, gate, "mul")


@dataclass
class DmscParams(Block):
    conv_a1: ConvUnit
    conv_a2: ConvUnit
    proj_b: ConvUnit
    conv_b1: ConvUnit
    conv_b2: ConvUnit
    gate_linear: ConvUnit
    reduce: ConvUnit
    lightweight: bool = False
    c_in: int = 0
    c_out: int = 0
    rank: int = 2
    kind: str = field(default="dmsc", init=False)
    _units = ("conv_a1", "conv_a2", "proj_b", "conv_b1", "conv_b2", "gate_linear", "reduce")

    def __call__(self, x):
        return dmsc_forward(x, self)

    def describe(self, prefix, spatial):
        vol = _prod(spatial)
        c = self.c_out
        rows = []
        for attr in ("conv_a1", "conv_a2", "proj_b", "conv_b1", "conv_b2"):
            unit = getattr(self, attr)
            if unit is not None:
                rows += unit.describe(f"{prefix}.{attr}", spatial)[0]
        rows.append(LayerRecord(f"{prefix}.concat", "concat"))
        rows += _gate_records(f"{prefix}.gate", self.gate_linear, 2 * c, spatial)
        rows += self.reduce.describe(f"{prefix}.reduce", spatial)[0]
        return rows, tuple(spatial)


def dmsc_forward(x, p):
    """Dynamic multi-scale conv; output ``N x c_out x spatial(x)``."""
    f1 = p.conv_a1(x)
    xb = x if p.proj_b is None else p.proj_b(x)
    f2 = p.conv_b1(xb)
    f1 = p.conv_a2(f1)
    f2 = p.conv_b2(f2)
    feats = ops.concat_channels(f1, f2)
    gate = channel_gate(feats, p.gate_linear)
    return p.reduce(ops.elementwise(feats, gate, "mul"))


def default_pool(rank, factor=4):
    """DMRC pooling window: ``f x f`` in 2-D; ``f x f x 1`` in 3-D (slice axis last, unpooled)."""
    return (factor,) * 2 if rank == 2 else (factor, factor, 1)


def build_block(kind, c_in, c_out, spatial_rank, lightweight=False, rng_seed=0, *,
                norm=True, dmsc_kernel=5, dmrc_pool=None, initialize=True):
    """Allocate and initialise one block.

    ``kind`` is ``plain_conv``, ``dmrc`` or ``dmsc``. Conv weights are
    He-uniform, biases zero, gate linears He-uniform scaled by 0.1 so initial
    gates sit near 0.5. ``rng_seed`` may be an int or a ``numpy`` Generator.
    ``initialize=False`` leaves all parameters zero (topology-only use).
    """
    if spatial_rank not in (2, 3):
        raise ConfigurationError(f"unsupported spatial rank {spatial_rank}")
    if c_in < 1 or c_out < 1:
        raise ConfigurationError(f"channel counts must be positive, got {c_in}->{c_out}")
    block = _allocate(kind, c_in, c_out, spatial_rank, lightweight, norm, dmsc_kernel, dmrc_pool)
    if initialize:
        block.reset(_as_rng(rng_seed))
    return block


def _allocate(kind, c_in, c_out, rank, lightweight, norm, dmsc_kernel, dmrc_pool):
    rng = None  # parameters are initialised by the caller via reset()
    if kind == "plain_conv":
        return PlainBlock(c_in, c_out, rank, rng, norm=norm)
    if kind == "dmrc":
        pool = tuple(dmrc_pool) if dmrc_pool is not None else default_pool(rank)
        if len(pool) != rank or any(f < 1 for f in pool):
            raise ConfigurationError(f"DMRC pool {pool} invalid for rank {rank}")
        return DmrcParams(
            conv_main=ConvUnit(c_in, c_out, rank, 3, rng, norm=norm),
            conv_low=ConvUnit(c_in, c_out, rank, 3, rng, norm=norm),
            conv_pix=ConvUnit(c_in, c_out, rank, 1, rng, norm=norm, act=None),
            conv_post=ConvUnit(c_out, c_out, rank, 3, rng, norm=norm),
            gate_linear=_gate_unit(c_out, rank, rng),
            pool=pool,
            c_in=c_in,
            c_out=c_out,
            rank=rank,
        )
    if kind == "dmsc":
        if dmsc_kernel % 2 == 0 or dmsc_kernel < 3:
            raise ConfigurationError(f"DMSC large kernel must be odd and >= 3, got {dmsc_kernel}")
        k = dmsc_kernel
        a1 = ConvUnit(c_in, c_out, rank, 3, rng, norm=norm)
        a2 = ConvUnit(c_out, c_out, rank, 3, rng, norm=norm)
        if lightweight:
            # depthwise convs cannot change width: project first when needed
            proj = None
            if c_in != c_out:
                proj = ConvUnit(c_in, c_out, rank, 1, rng, norm=False, act=None)
            b1 = ConvUnit(c_out, c_out, rank, k, rng, groups=c_out, norm=norm)
            b2 = ConvUnit(c_out, c_out, rank, k, rng, groups=c_out, norm=norm)
        else:
            proj = None
            b1 = ConvUnit(c_in, c_out, rank, k, rng, norm=norm)
            b2 = ConvUnit(c_out, c_out, rank, k, rng, norm=norm)
        return DmscParams(
            conv_a1=a1,
            conv_a2=a2,
            proj_b=proj,
            conv_b1=b1,
            conv_b2=b2,
            gate_linear=_gate_unit(2 * c_out, rank, rng),
            reduce=ConvUnit(2 * c_out, c_out, rank, 1, rng, norm=False, act=None),
            lightweight=lightweight,
            c_in=c_in,
            c_out=c_out,
            rank=rank,
        )
    raise ConfigurationError(f"unknown block kind {kind!r}")
