import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hyperconv import tensor as T
from hyperconv.tensor import GraphConsumedError, Tensor, backward, build_graph

from oracles import finite_difference_grad, matmul_loops, max_relative_error


def grad_of(fn, *arrays_):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays_]
    out = fn(*leaves)
    backward(build_graph(out), out)
    return [leaf.grad for leaf in leaves]


def fd_of(fn, *arrays_, which=0):
    xs = [a.copy() for a in arrays_]

    def f():
        return float(fn(*[Tensor(x) for x in xs]).data)

    return finite_difference_grad(f, xs[which])


def test_mul_elementwise_values():
    out = T.mul_elementwise(T.tensor([1.0, 2.0]), T.tensor([3.0, 4.0]))
    assert out.data.tolist() == [3.0, 8.0]


def test_scale_by_zero_gives_zeros():
    x = T.tensor(np.arange(6.0).reshape(2, 3))
    out = T.scale(x, 0)
    assert out.shape == (2, 3)
    assert np.all(out.data == 0)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        T.add(T.zeros((2,)), T.zeros((3,)))
    with pytest.raises(ValueError, match=r"\(2, 2\).*\(2, 3\)"):
        T.mul_elementwise(T.zeros((2, 2)), T.zeros((2, 3)))


def test_grad_of_product_sum_matches_other_factor(rng):
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))
    fn = lambda x, y: T.sum_(x * y)
    ga, _ = grad_of(fn, a, b)
    assert np.array_equal(ga, b)
    assert max_relative_error(ga, fd_of(fn, a, b)) < 1e-7


def test_matmul_identity_and_swap():
    v = T.tensor([[2.0], [5.0]])
    assert np.array_equal((T.tensor(np.eye(2)) @ v).data, v.data)
    assert (T.tensor([[0.0, 1.0], [1.0, 0.0]]) @ v).data.ravel().tolist() == [5.0, 2.0]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.max(np.abs((Tensor(a) @ Tensor(b)).data - matmul_loops(a, b))) < 1e-12


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError, match="inner dimensions"):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))


def test_matmul_gradients(rng):
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    fn = lambda x, y: T.sum_(T.matmul(x, y) * T.matmul(x, y))
    ga, gb = grad_of(fn, a, b)
    assert max_relative_error(ga, fd_of(fn, a, b, which=0)) < 1e-6
    assert max_relative_error(gb, fd_of(fn, a, b, which=1)) < 1e-6


def test_backward_simple_cases():
    x = Tensor(np.zeros(5), requires_grad=True)
    loss = T.sum_(x)
    backward(build_graph(loss), loss)
    assert np.array_equal(x.grad, np.ones(5))

    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum_(x * x)
    loss.backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        backward(build_graph(y), y)


def test_graph_cannot_be_reused():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_(x * x)
    g = build_graph(loss)
    backward(g, loss)
    with pytest.raises(GraphConsumedError):
        backward(g, loss)
    with pytest.raises(GraphConsumedError):
        loss.backward()


def test_graph_is_topologically_ordered(rng):
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    y = x @ x
    z = T.sum_(y * x + y)
    g = build_graph(z)
    assert all(i < j for i, j in g.edges())
    assert g.nodes[-1] is z


def test_accumulation_over_paths_is_the_sum(rng):
    a = rng.uniform(-1, 1, 4)
    f = lambda x: T.sum_(T.exp(x))
    g = lambda x: T.sum_(T.scale(x, 3.0))
    (gf,) = grad_of(f, a)
    (gg,) = grad_of(g, a)
    (gsum,) = grad_of(lambda x: f(x) + g(x), a)
    assert np.array_equal(gsum, gf + gg)


def test_forward_is_deterministic(rng):
    a = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3))
    r1 = T.einsum("oc,nchw->nohw", Tensor(w), Tensor(a)).data
    r2 = T.einsum("oc,nchw->nohw", Tensor(w), Tensor(a)).data
    assert np.array_equal(r1, r2)


def test_float32_switch():
    try:
        T.set_default_dtype(np.float32)
        assert Tensor([1.0, 2.0]).data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        T.set_default_dtype(np.int32)


def test_einsum_requires_explicit_output():
    with pytest.raises(ValueError, match="explicit output"):
        T.einsum("ij,jk", T.zeros((2, 2)), T.zeros((2, 2)))


def test_division_only_by_scalar():
    with pytest.raises(TypeError):
        T.ones((2,)) / T.ones((2,))
    assert (T.ones((2,)) / 4).data.tolist() == [0.25, 0.25]


UNARY_OPS = {
    "abs": lambda x: T.sum_(T.abs_(x) * x),
    "exp": lambda x: T.sum_(T.exp(x)),
    "square": lambda x: T.sum_(T.square(x)),
    "mean": lambda x: T.sum_(T.mean(x, axis=1) * T.mean(x, axis=1)),
    "transpose": lambda x: T.sum_(T.transpose(x) * T.transpose(x) * T.transpose(x)),
    "reshape": lambda x: T.sum_(T.reshape(x, (-1,)) * T.reshape(x * x, (-1,))),
    "tile0": lambda x: T.sum_(T.tile0(x, 3) * T.tile0(x, 3)),
    "repeat": lambda x: T.sum_(T.repeat_channels(x, 2, axis=1) * T.repeat_channels(x, 2, axis=1)),
    "group_sum": lambda x: T.sum_(T.square(T.group_sum(x, 2, axis=1))),
    "take": lambda x: T.sum_(T.square(T.take(x, 1, axis=1))),
    "einsum": lambda x: T.sum_(T.einsum("ij,kj->ik", x, x) * T.einsum("ij,kj->ik", x, x)),
    "einsum_reduce": lambda x: T.sum_(T.square(T.einsum("ij->i", x))),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_op_gradients_match_finite_differences(name, rng):
    fn = UNARY_OPS[name]
    a = rng.uniform(-1, 1, (3, 4))
    (g,) = grad_of(fn, a)
    assert max_relative_error(g, fd_of(fn, a), floor=1e-6) < 1e-5


def test_subsample_and_bias_gradients(rng):
    x = rng.uniform(-1, 1, (2, 3, 5, 5))
    b = rng.uniform(-1, 1, 3)
    fn = lambda u, c: T.sum_(T.square(T.subsample(T.add_channel_bias(u, c), 2)))
    gx, gb = grad_of(fn, x, b)
    assert max_relative_error(gx, fd_of(fn, x, b, which=0), floor=1e-6) < 1e-5
    assert max_relative_error(gb, fd_of(fn, x, b, which=1), floor=1e-6) < 1e-5


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float64, (2, 3), elements=st.floats(-1, 1)),
    arrays(np.float64, (2, 3), elements=st.floats(-1, 1)),
)
def test_product_rule_property(a, b):
    fn = lambda x, y: T.sum_(T.mul_elementwise(x, y) * x)
    ga, gb = grad_of(fn, a, b)
    assert np.allclose(ga, 2 * a * b, atol=1e-14)
    assert np.allclose(gb, a * a, atol=1e-14)
