import numpy as np
import pytest

from dmcnet import ops
from dmcnet.errors import ConfigurationError, ContractError
from dmcnet.tensor import Tape, Tensor, backward, finite_diff_gradcheck, no_grad


def _grad(f, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*ts)
    tape.backward(out)
    return [t.grad for t in ts]


def test_sum_gives_ones():
    x = np.arange(6.0).reshape(2, 3)
    (g,) = _grad(lambda t: ops.sum(t), x)
    np.testing.assert_array_equal(g, np.ones_like(x))


def test_square_product_rule():
    x = np.random.default_rng(0).standard_normal((3, 4))
    (g,) = _grad(lambda t: ops.sum(t * t), x)
    np.testing.assert_allclose(g, 2 * x, rtol=0, atol=1e-15)


def test_fan_out_accumulates():
    x = np.array([1.5, -2.0])
    (g,) = _grad(lambda t: ops.sum(t * 3.0 + t * t + t), x)
    np.testing.assert_allclose(g, 4.0 + 2 * x)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(tape, y)


def test_backward_is_deterministic():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    f = lambda a, b: ops.sum(ops.sigmoid(ops.conv_nd(a, b, None, 1, 1)))
    g1 = _grad(f, x, w)
    g2 = _grad(f, x, w)
    for a, b in zip(g1, g2):
        assert a.tobytes() == b.tobytes()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            ops.sum(x * x)
    assert len(tape) == 0


def test_gradcheck_sigmoid_sum():
    x = Tensor(np.random.default_rng(2).standard_normal((2, 3)))
    assert finite_diff_gradcheck(lambda t: ops.sum(ops.sigmoid(t)), [x]) < 1e-7


def test_gradcheck_linear_is_exact():
    x = Tensor(np.random.default_rng(3).standard_normal(5))
    c = np.arange(5.0)
    err = finite_diff_gradcheck(lambda t: ops.sum(t * c + 2.0), [x])
    assert err < 1e-9


def test_gradcheck_conv_weight():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    err = finite_diff_gradcheck(lambda a, b: ops.sum(ops.conv_nd(a, b, None, 1, 1)), [x, w])
    assert err < 1e-7


def test_gradcheck_reports_kinks():
    # |x| style kink at a coordinate within h of zero
    x = Tensor(np.array([1e-7, 0.7, -0.4]))
    rep = {}
    finite_diff_gradcheck(lambda t: ops.sum(ops.leaky_relu(t)), [x], report=rep)
    assert rep["kinks"] == 1 and rep["checked"] == 2


def test_gradcheck_higher_order_stencil():
    x = Tensor(np.random.default_rng(5).standard_normal(4))
    f = lambda t: ops.sum(ops.sigmoid(t * t))
    assert finite_diff_gradcheck(f, [x], h=1e-3, points=6) < 1e-9
    with pytest.raises(ConfigurationError):
        finite_diff_gradcheck(f, [x], points=3)


def test_gradcheck_restores_requires_grad():
    x = Tensor(np.ones(2))
    finite_diff_gradcheck(lambda t: ops.sum(t * t), [x])
    assert x.requires_grad is False
