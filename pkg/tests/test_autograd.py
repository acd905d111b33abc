import numpy as np
import pytest

from diffusion_fiqa import autograd as ag
from diffusion_fiqa.errors import ContractError, ShapeError
from diffusion_fiqa.nn import Conv2d, GroupNorm


@pytest.fixture(autouse=True)
def float64():
    with ag.dtype_scope(np.float64):
        yield


def leaf(rng, *shape, scale=1.0):
    return ag.parameter(rng.standard_normal(shape) * scale)


def test_add_elementwise():
    out = ag.forward_eval(ag.add(ag.Tensor([1.0, 2.0]), ag.Tensor([3.0, 4.0])))
    np.testing.assert_array_equal(out, [4.0, 6.0])


def test_matmul_1x1():
    out = ag.matmul(ag.Tensor([[2.0]]), ag.Tensor([[3.0]]))
    assert out.data.tolist() == [[6.0]]


def test_conv_of_zeros_is_zero():
    w = np.random.default_rng(0).standard_normal((4, 3, 3, 2))
    out = ag.conv2d(ag.Tensor(np.zeros((1, 5, 5, 2))), ag.Tensor(w))
    assert np.all(out.data == 0)


def test_shape_error_names_operation():
    with pytest.raises(ShapeError, match="matmul"):
        ag.matmul(ag.Tensor(np.ones((2, 3))), ag.Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ag.add(ag.Tensor(np.ones(3)), ag.Tensor(np.ones(4)))


def test_square_gradient():
    x = ag.parameter(3.0)
    grads = ag.backward(x * x)
    assert grads[x] == pytest.approx(6.0)


def test_sum_gradient_is_ones():
    x = ag.parameter(np.random.default_rng(1).standard_normal((2, 3, 4)))
    ag.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_non_scalar_root_rejected():
    x = ag.parameter(np.ones(3))
    with pytest.raises(ContractError):
        ag.backward(x * 2.0)


def test_repeat_backward_after_reset_identical():
    rng = np.random.default_rng(2)
    x = leaf(rng, 4, 3)
    w = leaf(rng, 3, 2)
    loss = ag.mean(ag.silu(ag.matmul(x, w)))
    ag.backward(loss)
    first = w.grad.copy()
    w.zero_grad()
    x.zero_grad()
    ag.backward(loss)
    np.testing.assert_array_equal(first, w.grad)


def test_forward_eval_replays_after_leaf_change():
    x = ag.parameter(np.array([1.0, 2.0]))
    y = ag.tsum(x * x)
    assert float(y.data) == 5.0
    x.data = np.array([3.0, 0.0])
    assert float(ag.forward_eval(y)) == 9.0


def test_forward_eval_deterministic():
    rng = np.random.default_rng(3)
    x = ag.Tensor(rng.standard_normal((2, 8, 8, 3)))
    w = ag.Tensor(rng.standard_normal((4, 3, 3, 3)))
    y = ag.group_norm(ag.conv2d(x, w, stride=2), 2)
    a = ag.forward_eval(y).copy()
    b = ag.forward_eval(y)
    assert a.tobytes() == b.tobytes()


def test_linearity_of_backward():
    rng = np.random.default_rng(4)
    x = leaf(rng, 5)
    f1 = lambda: ag.tsum(ag.silu(x))
    f2 = lambda: ag.mean(x * x * 3.0)
    ag.backward(f1())
    g1 = x.grad.copy()
    x.zero_grad()
    ag.backward(f2())
    g2 = x.grad.copy()
    x.zero_grad()
    ag.backward(f1() + f2())
    np.testing.assert_allclose(x.grad, g1 + g2, rtol=1e-12)


# every differentiable primitive against central differences
PRIMITIVES = {
    "add": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 1, 4)), lambda: ag.tsum(ag.add(a, b) ** 2)),
    "sub": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 3, 1)), lambda: ag.tsum(ag.sub(a, b) ** 2)),
    "mul": lambda r: ((a := leaf(r, 2, 3)), (b := leaf(r, 2, 3)), lambda: ag.tsum(ag.mul(a, b))),
    "div": lambda r: ((a := leaf(r, 2, 3)), (b := ag.parameter(r.uniform(1, 2, (2, 3)))), lambda: ag.tsum(ag.div(a, b))),
    "scalar": lambda r: ((a := leaf(r, 4)), lambda: ag.tsum((a * 2.5 + 1.0) * (a - 0.5))),
    "matmul": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 4, 2)), lambda: ag.tsum(ag.matmul(a, b) ** 2)),
    "conv2d_s1_same": lambda r: ((x := leaf(r, 2, 5, 5, 2)), (w := leaf(r, 3, 3, 3, 2)),
                                 lambda: ag.tsum(ag.conv2d(x, w, 1, "same") ** 2)),
    "conv2d_s2_same": lambda r: ((x := leaf(r, 2, 6, 6, 2)), (w := leaf(r, 3, 3, 3, 2)),
                                 lambda: ag.tsum(ag.conv2d(x, w, 2, "same") ** 2)),
    "conv2d_s1_valid": lambda r: ((x := leaf(r, 1, 5, 4, 3)), (w := leaf(r, 2, 3, 3, 3)),
                                  lambda: ag.tsum(ag.conv2d(x, w, 1, "valid") ** 2)),
    "conv2d_s2_valid": lambda r: ((x := leaf(r, 1, 7, 7, 2)), (w := leaf(r, 2, 3, 3, 2)),
                                  lambda: ag.tsum(ag.conv2d(x, w, 2, "valid") ** 2)),
    "upsample2x": lambda r: ((x := leaf(r, 2, 3, 3, 2)), (c := ag.Tensor(r.standard_normal((2, 6, 6, 2)))),
                             lambda: ag.tsum(ag.upsample2x(x) * c)),
    "relu": lambda r: ((x := ag.parameter(r.choice([-1, 1], 10) * r.uniform(0.1, 1, 10))), lambda: ag.tsum(ag.relu(x) ** 2)),
    "silu": lambda r: ((x := leaf(r, 10)), lambda: ag.tsum(ag.silu(x) ** 2)),
    "sigmoid": lambda r: ((x := leaf(r, 10)), lambda: ag.tsum(ag.sigmoid(x) ** 2)),
    "group_norm": lambda r: ((x := leaf(r, 2, 3, 3, 4)), (c := ag.Tensor(r.standard_normal((2, 3, 3, 4)))),
                             lambda: ag.tsum(ag.group_norm(x, 2) * c)),
    "instance_norm": lambda r: ((x := leaf(r, 2, 3, 3, 2)), (c := ag.Tensor(r.standard_normal((2, 3, 3, 2)))),
                                lambda: ag.tsum(ag.instance_norm(x) * c)),
    "mean": lambda r: ((x := leaf(r, 3, 4)), lambda: ag.tsum(ag.mean(x, axis=1) ** 2)),
    "sum": lambda r: ((x := leaf(r, 3, 4)), lambda: ag.tsum(ag.tsum(x, axis=0, keepdims=True) ** 2)),
    "mse": lambda r: ((a := leaf(r, 2, 5)), (b := leaf(r, 2, 5)), lambda: ag.mse(a, b)),
    "reshape": lambda r: ((x := leaf(r, 2, 6)), lambda: ag.tsum(ag.reshape(x, (3, 4)) ** 3)),
    "concat": lambda r: ((a := leaf(r, 2, 3)), (b := leaf(r, 2, 2)), lambda: ag.tsum(ag.concat([a, b], axis=1) ** 2)),
    "exp_log_sqrt": lambda r: ((x := ag.parameter(r.uniform(0.5, 2, 6))), lambda: ag.tsum(ag.log(ag.exp(x) + ag.sqrt(x)))),
    "log_softmax": lambda r: ((x := leaf(r, 3, 5)), (c := ag.Tensor(r.standard_normal((3, 5)))),
                              lambda: ag.tsum(ag.log_softmax(x, -1) * c)),
    "l2_normalize": lambda r: ((x := leaf(r, 3, 4)), (c := ag.Tensor(r.standard_normal((3, 4)))),
                               lambda: ag.tsum(ag.l2_normalize(x) * c)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradcheck(name, seed):
    *leaves, fn = PRIMITIVES[name](np.random.default_rng(seed))
    leaves = [t for t in leaves if t.requires_grad]
    assert ag.gradient_check(fn, leaves, eps=1e-5) < 1e-4


def test_three_layer_conv_net_gradcheck():
    rng = np.random.default_rng(7)
    c1 = Conv2d(2, 4, 3, rng=rng)
    norm = GroupNorm(4, 2)
    c2 = Conv2d(4, 4, 3, stride=2, rng=rng)
    c3 = Conv2d(4, 2, 3, rng=rng)
    x = ag.Tensor(rng.standard_normal((2, 6, 6, 2)))
    target = ag.Tensor(rng.standard_normal((2, 6, 6, 2)))

    def loss():
        h = ag.silu(norm(c1(x)))
        h = ag.silu(c2(h))
        return ag.mse(c3(ag.upsample2x(h)), target)

    params = [p for m in (c1, norm, c2, c3) for p in m.parameters().values()]
    for p in params:
        p.data = p.data + rng.standard_normal(p.shape) * 0.1
    assert ag.gradient_check(loss, params, eps=1e-5) < 1e-4


def test_float32_default_and_scalar_ops_stay_narrow():
    with ag.dtype_scope(np.float32):
        x = ag.Tensor(np.ones(3))
        assert (x * 0.1 + 2).dtype == np.float32
