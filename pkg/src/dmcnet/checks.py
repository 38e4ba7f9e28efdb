"""Finite-difference gradient suite over primitives, blocks and a tiny network.

Every check differentiates a scalar probe ``sum(R * f(inputs))`` with a
fixed random weight ``R``, so no output coordinate is privileged. Blocks are
checked at a generic parameter point (random norm affines and biases) rather
than at initialisation, where zero biases and unit gains make some gradients
vanish by symmetry.

Conv biases that feed an instance norm have an exactly zero gradient (the
mean subtraction removes them). Central differences cannot resolve a zero in
relative terms, so these tensors are excluded from the relative comparison
and checked separately: their tape gradient must sit at roundoff level,
below ``ZERO_GRAD_TOL`` times the largest gradient entry of the check.

Central differences at step ``h`` carry an absolute error of roughly
``eps * |f| / h`` (about 1e-11 here). Coordinates whose true gradient is a
few millionths of the largest entry sit at that floor, so their relative
error can exceed the tolerance while the gradient is right. The relative
error stays the pass/fail measure; ``normwise`` is reported next to it.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import build_block
from .networks import NetworkSpec, build_network
from .tensor import Tape, Tensor, finite_diff_gradcheck
from .training import combined_loss

PRIMITIVE_TOL = 1e-6
BLOCK_TOL = 1e-6
NETWORK_TOL = 1e-5
MAX_KINK_SHARE = 0.05
ZERO_GRAD_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    checked: int
    kinks: int
    seconds: float
    note: str = ""
    exact: bool = False
    normwise: float = None

    @property
    def passed(self):
        if self.exact:
            return self.error <= self.tol
        total = self.checked + self.kinks
        return self.error < self.tol and self.checked > 0 and self.kinks <= MAX_KINK_SHARE * total

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.note})" if self.note else ""
        norm = f" normwise={self.normwise:.1e}" if self.normwise is not None else ""
        return (f"{status} {self.name:<34} max_rel_err={self.error:.2e} tol={self.tol:.0e} "
                f"coords={self.checked} kinks={self.kinks}{norm} {self.seconds:.1f}s{extra}")


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _probe(fn, out_shape, rng):
    weight = rng.standard_normal(out_shape)
    return lambda *xs: ops.sum(ops.mul(fn(*xs), weight))


def _run(name, fn, inputs, out_shape, tol, seed, max_coords=None, skip=None, note=""):
    rng = np.random.default_rng(seed + 7919)
    f = _probe(fn, out_shape, rng)
    rep = {}
    t0 = time.perf_counter()
    err = finite_diff_gradcheck(f, inputs, max_coords=max_coords, seed=seed, skip=skip, report=rep)
    return CheckResult(name, err, tol, rep["checked"], rep["kinks"], time.perf_counter() - t0, note,
                       normwise=rep["normwise"])


def primitive_checks(seed=0):
    rng = np.random.default_rng(seed)
    out = []

    def add(name, fn, inputs, tol=PRIMITIVE_TOL):
        shape = fn(*inputs).shape
        out.append(_run(name, fn, inputs, shape, tol, seed))

    x2, w2, b2 = _rand(rng, 2, 3, 6, 5), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
    add("conv_nd 2d", lambda x, w, b: ops.conv_nd(x, w, b, 1, 1), [x2, w2, b2])
    add("conv_nd 2d stride 2", lambda x, w: ops.conv_nd(x, w, None, 2, 1), [x2, w2])
    x3, w3, b3 = _rand(rng, 1, 2, 4, 5, 3), _rand(rng, 3, 2, 3, 3, 3), _rand(rng, 3)
    add("conv_nd 3d", lambda x, w, b: ops.conv_nd(x, w, b, 1, 1), [x3, w3, b3])
    xg, wg = _rand(rng, 1, 4, 5, 5), _rand(rng, 4, 1, 5, 5)
    add("conv_nd depthwise 5x5", lambda x, w: ops.conv_nd(x, w, None, 1, 2, 4), [xg, wg])
    xg3, wg3 = _rand(rng, 1, 3, 4, 4, 4), _rand(rng, 3, 1, 3, 3, 3)
    add("conv_nd depthwise 3d", lambda x, w: ops.conv_nd(x, w, None, 1, 1, 3), [xg3, wg3])
    xt, wt, bt = _rand(rng, 1, 3, 3, 4), _rand(rng, 3, 2, 3, 3), _rand(rng, 2)
    add("transposed_conv_nd 2d", lambda x, w, b: ops.transposed_conv_nd(x, w, b), [xt, wt, bt])
    xt3, wt3 = _rand(rng, 1, 2, 2, 3, 2), _rand(rng, 2, 2, 3, 3, 3)
    add("transposed_conv_nd 3d", lambda x, w: ops.transposed_conv_nd(x, w), [xt3, wt3])
    xp = _rand(rng, 1, 2, 8, 8)
    add("pool_nd avg 4x4", lambda x: ops.pool_nd(x, "avg", 4, 4), [xp])
    add("pool_nd max 2x2", lambda x: ops.pool_nd(x, "max", 2, 2), [xp])
    add("pool_nd avg 3d 4x4x1", lambda x: ops.pool_nd(x, "avg", (4, 4, 1), (4, 4, 1)),
        [_rand(rng, 1, 2, 4, 4, 3)])
    add("upsample_nearest_nd", lambda x: ops.upsample_nearest_nd(x, 4), [_rand(rng, 1, 2, 2, 3)])
    xe = _rand(rng, 2, 3, 4, 4)
    add("sigmoid", ops.sigmoid, [xe])
    add("leaky_relu", lambda x: ops.leaky_relu(x, 0.01), [xe])
    add("relu", ops.relu, [xe])
    ye, gate = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 1, 1)
    add("elementwise add", lambda a, b: ops.elementwise(a, b, "add"), [xe, ye])
    add("elementwise mul", lambda a, b: ops.elementwise(a, b, "mul"), [xe, ye])
    add("elementwise mul channel gate", lambda a, g: ops.elementwise(a, g, "mul"), [xe, gate])
    add("div", ops.div, [xe, Tensor(np.abs(ye.data) + 0.5)])
    add("concat_channels", ops.concat_channels, [xe, _rand(rng, 2, 2, 4, 4)])
    add("slice_channels", lambda x: ops.slice_channels(x, 1, 3), [xe])
    add("global_avg_pool", ops.global_avg_pool, [xe])
    add("instance_norm", ops.instance_norm,
        [xe, Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(rng.uniform(-0.5, 0.5, 3))])
    add("instance_norm 3d", ops.instance_norm,
        [_rand(rng, 1, 2, 3, 4, 2), Tensor(rng.uniform(0.5, 1.5, 2)), Tensor(rng.uniform(-0.5, 0.5, 2))])
    add("sum over axes", lambda x: ops.sum(x, axis=(0, 2, 3)), [xe])
    add("mean", lambda x: ops.mean(x, axis=1, keepdims=True), [xe])
    add("softmax", lambda x: ops.softmax(x, axis=1), [xe])
    add("log_softmax", lambda x: ops.log_softmax(x, axis=1), [xe])
    return out


def _generic_point(named, rng):
    """Move norm affines and biases off their initial values."""
    for name, t in named:
        if name.endswith("gamma"):
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
        elif name.endswith("beta") or name.endswith("bias"):
            t.data[...] = rng.uniform(-0.5, 0.5, t.shape)


def _pre_norm_biases(named):
    names = {n for n, _ in named}
    return {i for i, (n, _) in enumerate(named)
            if n.endswith(".bias") and n[: -len(".bias")] + ".norm.gamma" in names}


def _zero_gradient_check(name, f, inputs, positions):
    """Tape gradients of the listed inputs must vanish up to roundoff."""
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    scale = max(float(np.abs(t.grad).max()) for t in inputs if t.grad is not None)
    worst = max((float(np.abs(inputs[i].grad).max()) for i in positions), default=0.0)
    for t in inputs:
        t.requires_grad = False
        t.grad = None
    return CheckResult(name, worst / max(scale, 1.0), ZERO_GRAD_TOL, len(positions), 0, 0.0,
                       "|grad| / max|grad|", exact=True)


BLOCK_CASES = (
    ("dmrc", False, 2, (1, 2, 8, 8)),
    ("dmsc", False, 2, (1, 2, 8, 8)),
    ("dmsc", True, 2, (1, 2, 8, 8)),
    ("dmrc", False, 3, (1, 2, 8, 8, 4)),
    ("dmsc", False, 3, (1, 2, 8, 8, 4)),
    ("dmsc", True, 3, (1, 2, 8, 8, 4)),
)


def block_checks(seed=0, c_out=3, max_coords=None):
    out = []
    for kind, lightweight, rank, shape in BLOCK_CASES:
        rng = np.random.default_rng(seed)
        blk = build_block(kind, shape[1], c_out, rank, lightweight=lightweight, rng_seed=seed)
        named = list(blk.named_parameters("b"))
        _generic_point(named, rng)
        x = Tensor(rng.standard_normal(shape))
        inputs = [x] + [t for _, t in named]
        zero = {i + 1 for i in _pre_norm_biases(named)}
        label = f"{kind}{' lightweight' if lightweight else ''} {rank}d {'x'.join(map(str, shape))}"
        fn = lambda x, *ps, blk=blk: blk(x)
        out.append(_run(label, fn, inputs, (1, c_out) + shape[2:], BLOCK_TOL, seed,
                        max_coords=max_coords, skip=zero))
        if zero:
            probe = _probe(fn, (1, c_out) + shape[2:], np.random.default_rng(seed + 7919))
            out.append(_zero_gradient_check(f"{label} pre-norm bias", probe, inputs, zero))
    return out


TINY_SPEC = dict(rank=2, variant="dmc", stage_channels=(4, 8), num_classes=3, seed=0)
TINY_PATCH = (16, 16)


def network_check(seed=0, max_coords=None):
    """End-to-end: tiny DMC network + combined loss; ``max_coords`` samples per tensor."""
    spec = NetworkSpec(**TINY_SPEC)
    model = build_network(spec)
    rng = np.random.default_rng(seed)
    named = model.named_parameters()
    _generic_point(named, rng)
    x = Tensor(rng.standard_normal((1, 1) + TINY_PATCH))
    target = rng.integers(0, spec.num_classes, size=(1,) + TINY_PATCH)
    inputs = [x] + [t for _, t in named]
    zero = {i + 1 for i in _pre_norm_biases(named)}

    def f(x, *ps):
        return combined_loss(model.forward(x), target)

    rep = {}
    t0 = time.perf_counter()
    err = finite_diff_gradcheck(f, inputs, max_coords=max_coords, seed=seed, skip=zero, report=rep)
    note = f"{max_coords} coords/tensor" if max_coords else "all coords"
    res = [CheckResult("tiny dmc network + combined loss", err, NETWORK_TOL, rep["checked"],
                       rep["kinks"], time.perf_counter() - t0, note, normwise=rep["normwise"])]
    res.append(_zero_gradient_check("tiny network pre-norm bias", f, inputs, zero))
    return res


def run_suite(seed=0, quick=False):
    """All checks in order, every coordinate; ``quick`` samples the end-to-end network."""
    results = primitive_checks(seed) + block_checks(seed)
    results += network_check(seed, max_coords=6 if quick else None)
    return results
