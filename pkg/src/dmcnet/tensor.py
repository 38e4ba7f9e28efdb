"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations (see :mod:`dmcnet.ops`) record a node on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient::

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    tape.backward(loss)
    x.grad  # == 2 * x.data
"""

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

_TAPES = []
_BRANCH_LOG = None


class Tensor:
    """An N-dimensional float64 array with an optional gradient slot.

    Layout is ``N x C x spatial`` for feature maps. ``node`` is the index of
    the tape node that produced this tensor, ``None`` for leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor extents must all be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        # adopt an array produced by an op without copying it
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.grad = None
        t.requires_grad = False
        t.node = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; broadcasting follows NumPy rules
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Node:
    __slots__ = ("op", "out", "parents", "vjp")

    def __init__(self, op, out, parents, vjp):
        self.op = op
        self.out = out
        self.parents = parents
        self.vjp = vjp

    def parent_ids(self):
        return tuple(p.node for p in self.parents if p.node is not None)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's parents have
    smaller indices and reverse order is a valid topological sweep.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, out, parents, vjp):
        out.node = len(self.nodes)
        out.requires_grad = True
        self.nodes.append(Node(op, out, parents, vjp))
        return out.node

    def backward(self, loss):
        backward(self, loss)


def active_tape():
    return _TAPES[-1] if _TAPES else None


def no_grad():
    """Context manager that suspends recording."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
        return False


def note_branch(selector):
    """Report the branch taken by a piecewise op (sign mask, argmax index).

    Only active inside :func:`finite_diff_gradcheck`, which uses the log to
    spot stencils that straddle a kink.
    """
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(np.asarray(selector).tobytes())


def _evaluate_logged(f, inputs):
    global _BRANCH_LOG
    saved, _BRANCH_LOG = _BRANCH_LOG, []
    try:
        value = f(*inputs).item()
        return value, _BRANCH_LOG
    finally:
        _BRANCH_LOG = saved


def record(op, out_data, parents, vjp):
    """Wrap ``out_data`` and record it on the active tape if any parent needs grad.

    ``vjp(grad_out)`` must return one gradient array (or ``None``) per parent.
    """
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(op, out, tuple(parents), vjp)
    return out


def backward(tape, loss):
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Gradients accumulate across fan-out. Intermediate tensors receive their
    gradient in ``.grad``; leaves accumulate into ``.grad`` (``+=``), so call
    ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.node >= len(tape.nodes) or tape.nodes[loss.node].out is not loss:
        raise ContractError("loss was not recorded on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes[: loss.node + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.node is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        g = grads[key]
        if g.shape != leaf.shape:
            raise DimensionError(f"gradient shape {g.shape} != leaf shape {leaf.shape}")
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            leaf.grad += g


# central-difference weights for offsets 1..k (antisymmetric); error O(h^(2k))
STENCILS = {
    2: (1.0 / 2.0,),
    4: (2.0 / 3.0, -1.0 / 12.0),
    6: (3.0 / 4.0, -3.0 / 20.0, 1.0 / 60.0),
}


def finite_diff_gradcheck(f, inputs, h=1e-5, max_coords=None, seed=0, skip=None, report=None,
                          points=2):
    """Largest relative error between tape gradients and central differences.

    ``f(*inputs)`` must return a scalar tensor. Relative error per coordinate
    is ``|a - b| / max(|a|, |b|, 1e-8)``. ``points`` selects the central
    stencil (2, 4 or 6 evaluations per coordinate). With ``max_coords`` set,
    at most that many coordinates per input are checked, drawn with ``seed``.
    ``skip`` is an optional set of input positions excluded from the
    comparison.

    A coordinate whose stencil changes the branch of any piecewise op (leaky
    ReLU sign, max-pool argmax) at any of its evaluation points is not
    differentiable there, so it is left out of the maximum. Pass a dict as
    ``report`` to receive the counts ``checked`` and ``kinks`` plus
    ``normwise``, the largest absolute deviation over the largest analytic
    entry among checked coordinates.
    """
    if points not in STENCILS:
        raise ConfigurationError(f"points must be one of {sorted(STENCILS)}, got {points}")
    weights = STENCILS[points]
    inputs = list(inputs)
    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"gradcheck needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t, flag in zip(inputs, saved):
        t.requires_grad = flag
        t.grad = None

    rng = np.random.default_rng(seed)
    worst = dev = peak = 0.0
    checked = kinks = 0
    with no_grad():
        _, base = _evaluate_logged(f, inputs)
        for pos, (t, a) in enumerate(zip(inputs, analytic)):
            if skip and pos in skip:
                continue
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a_flat = a.reshape(-1)
            for i in coords:
                orig = flat[i]
                num = 0.0
                kink = False
                for k, w in enumerate(weights, start=1):
                    flat[i] = orig + k * h
                    fp, branch_p = _evaluate_logged(f, inputs)
                    flat[i] = orig - k * h
                    fm, branch_m = _evaluate_logged(f, inputs)
                    kink = kink or branch_p != base or branch_m != base
                    num += w * (fp - fm)
                flat[i] = orig
                if kink:
                    kinks += 1
                    continue
                checked += 1
                num /= h
                ana = a_flat[i]
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, rel)
                dev = max(dev, abs(ana - num))
                peak = max(peak, abs(ana))
    if report is not None:
        report["checked"] = checked
        report["kinks"] = kinks
        report["normwise"] = dev / peak if peak > 0 else dev
    return worst
