"""U-shaped segmentation networks assembled from blocks.

Four variants share one skeleton and differ only in the block pair used in
every encoder and decoder stage:

    unet  plain conv, plain conv
    dmrc  DMRC,       plain conv
    dmsc  DMSC,       plain conv
    dmc   DMSC,       DMRC

A 1-kernel stem projects the input to the first stage width. Stages are
separated by 2x max pooling; the first block of each stage carries the channel
change. The decoder upsamples with stride-2 transposed convs, concatenates the
matching encoder output and runs the stage's block pair (``2C -> C``, then
``C -> C``). A 1-kernel head emits per-class logits.

Parameter names are hierarchical and stable, e.g.
``enc2.block0.conv_main.weight`` or ``dec1.up.weight``.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .blocks import ConvUnit, LayerRecord, build_block, default_pool
from .errors import ConfigurationError, GeometryError, NonFiniteLossError
from .tensor import Tensor

VARIANTS = {
    "unet": ("plain_conv", "plain_conv"),
    "dmrc": ("dmrc", "plain_conv"),
    "dmsc": ("dmsc", "plain_conv"),
    "dmc": ("dmsc", "dmrc"),
}

DEFAULT_CHANNELS = {2: (32, 64, 128, 256, 512, 512), 3: (32, 64, 128, 256, 512)}


@dataclass
class NetworkSpec:
    """Declarative network description; ``None`` fields take rank defaults."""

    rank: int = 2
    variant: str = "dmc"
    stage_channels: tuple = None
    num_classes: int = 2
    lightweight_dmsc: bool = None
    input_channels: int = 1
    seed: int = 0
    dmsc_kernel: int = 5
    dmrc_pool: tuple = None
    plain_convs: bool = False

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ConfigurationError(f"spatial rank must be 2 or 3, got {self.rank}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.stage_channels is None:
            self.stage_channels = DEFAULT_CHANNELS[self.rank]
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) < 1 or any(c < 1 for c in self.stage_channels):
            raise ConfigurationError(f"stage_channels must be positive, got {self.stage_channels}")
        if self.lightweight_dmsc is None:
            self.lightweight_dmsc = self.rank == 3
        if self.dmrc_pool is None:
            self.dmrc_pool = default_pool(self.rank)
        self.dmrc_pool = tuple(int(f) for f in self.dmrc_pool)
        if len(self.dmrc_pool) != self.rank:
            raise ConfigurationError(f"dmrc_pool {self.dmrc_pool} does not match rank {self.rank}")
        if self.num_classes < 1 or self.input_channels < 1:
            raise ConfigurationError("num_classes and input_channels must be positive")

    @property
    def stages(self):
        return len(self.stage_channels)

    def uses(self, kind):
        return kind in VARIANTS[self.variant]

    def divisor(self):
        """Per-axis divisibility an input patch must satisfy."""
        down = 2 ** (self.stages - 1)
        if self.uses("dmrc"):
            return tuple(down * f for f in self.dmrc_pool)
        return (down,) * self.rank

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["dmrc_pool"] = list(self.dmrc_pool)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown network fields {sorted(unknown)}")
        return cls(**d)


def check_geometry(spec, spatial):
    spatial = tuple(spatial)
    if len(spatial) != spec.rank:
        raise GeometryError(f"expected {spec.rank} spatial axes, got {spatial}")
    need = spec.divisor()
    bad = [(axis, n, d) for axis, (n, d) in enumerate(zip(spatial, need)) if n % d]
    if bad:
        axis, n, d = bad[0]
        raise GeometryError(
            f"patch {spatial} invalid: axis {axis} extent {n} not divisible by {d} "
            f"(required divisibility per axis {need})"
        )


@dataclass
class Stage:
    name: str
    blocks: list = field(default_factory=list)
    up: ConvUnit = None


class Model:
    """Instantiated network: parameter store plus forward and topology.

    The constructor leaves parameters zero; use :func:`build_network` or
    :func:`init_params` for a trainable model.
    """

    def __init__(self, spec):
        self.spec = spec
        norm = not spec.plain_convs
        ch = spec.stage_channels
        kinds = VARIANTS[spec.variant]

        def block(kind, c_in, c_out):
            return build_block(
                kind, c_in, c_out, spec.rank, lightweight=spec.lightweight_dmsc, norm=norm,
                dmsc_kernel=spec.dmsc_kernel, dmrc_pool=spec.dmrc_pool, initialize=False,
            )

        self.stem = ConvUnit(spec.input_channels, ch[0], spec.rank, 1, norm=False, act=None)
        self.encoder = []
        for i, c in enumerate(ch):
            c_in = ch[i - 1] if i else ch[0]
            self.encoder.append(Stage(f"enc{i}", [block(kinds[0], c_in, c), block(kinds[1], c, c)]))
        self.decoder = []
        for i in reversed(range(len(ch) - 1)):
            c = ch[i]
            up = ConvUnit(ch[i + 1], c, spec.rank, 3, norm=False, act=None, transposed=True)
            self.decoder.append(Stage(f"dec{i}", [block(kinds[0], 2 * c, c), block(kinds[1], c, c)], up))
        self.head = ConvUnit(ch[0], spec.num_classes, spec.rank, 1, norm=False, act=None)
        self.params = OrderedDict(self._named())

    def _units(self):
        # initialisation order; fixed so seeds reproduce across runs
        yield "stem", self.stem
        for stage in self.encoder + self.decoder:
            if stage.up is not None:
                yield f"{stage.name}.up", stage.up
            for j, blk in enumerate(stage.blocks):
                for attr in blk._units:
                    unit = getattr(blk, attr)
                    if unit is not None:
                        yield f"{stage.name}.block{j}.{attr}", unit
        yield "head", self.head

    def _named(self):
        for prefix, unit in self._units():
            yield from unit.named_parameters(prefix)

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def param_count(self):
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def requires_grad_(self, flag=True):
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def __call__(self, x, monitor=None):
        return self.forward(x, monitor)

    def forward(self, x, monitor=None):
        """Logits for ``x``. ``monitor(name, tensor)`` sees every block output."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != self.spec.rank + 2:
            raise GeometryError(f"expected N x C x {self.spec.rank}-D input, got shape {x.shape}")
        if x.shape[1] != self.spec.input_channels:
            raise GeometryError(f"expected {self.spec.input_channels} input channels, got {x.shape[1]}")
        check_geometry(self.spec, x.shape[2:])
        watch = monitor or (lambda name, t: None)
        h = self.stem(x)
        watch("stem", h)
        skips = []
        for i, stage in enumerate(self.encoder):
            if i:
                h = ops.pool_nd(h, "max", 2, 2)
            for j, blk in enumerate(stage.blocks):
                h = blk(h)
                watch(f"{stage.name}.block{j}", h)
            skips.append(h)
        for stage, skip in zip(self.decoder, reversed(skips[:-1])):
            h = stage.up(h)
            watch(f"{stage.name}.up", h)
            h = ops.concat_channels(h, skip)
            for j, blk in enumerate(stage.blocks):
                h = blk(h)
                watch(f"{stage.name}.block{j}", h)
        out = self.head(h)
        watch("head", out)
        return out

    def describe(self, spatial):
        """Per-layer topology rows at input extent ``spatial``, batch 1."""
        check_geometry(self.spec, spatial)
        sp = tuple(spatial)
        rows, sp = self.stem.describe("stem", sp)
        shapes = []
        for i, stage in enumerate(self.encoder):
            if i:
                c = self.spec.stage_channels[i - 1]
                sp = tuple(n // 2 for n in sp)
                rows.append(LayerRecord(f"{stage.name}.max_pool", "pool", elems=c * int(np.prod(sp))))
            for j, blk in enumerate(stage.blocks):
                r, sp = blk.describe(f"{stage.name}.block{j}", sp)
                rows += r
            shapes.append(sp)
        for stage, skip_sp in zip(self.decoder, reversed(shapes[:-1])):
            r, sp = stage.up.describe(f"{stage.name}.up", sp)
            rows += r
            if sp != skip_sp:
                raise GeometryError(f"{stage.name}: upsampled {sp} != skip {skip_sp}")
            rows.append(LayerRecord(f"{stage.name}.concat", "concat"))
            for j, blk in enumerate(stage.blocks):
                r, sp = blk.describe(f"{stage.name}.block{j}", sp)
                rows += r
        rows += self.head.describe("head", sp)[0]
        return rows


def init_params(model, seed):
    """Re-initialise every parameter deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    for _, unit in model._units():
        unit.reset(rng)


def build_network(spec):
    model = Model(spec)
    init_params(model, spec.seed)
    return model


def model_forward(model, patch, check_finite=False):
    """Forward pass; with ``check_finite`` raise on the first non-finite layer."""
    if not check_finite:
        return model.forward(patch)

    def monitor(name, t):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteLossError(f"non-finite activation first produced by layer {name}", layer=name)

    return model.forward(patch, monitor)


def first_nonfinite_layer(model, patch):
    """Name of the first layer producing a non-finite value, or ``None``."""
    try:
        model_forward(model, patch, check_finite=True)
    except NonFiniteLossError as err:
        return err.layer
    return None
