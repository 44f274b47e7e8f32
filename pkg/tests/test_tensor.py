import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from temde import tensor as tt
from temde.errors import ContractError, DegenerateBatchError, DimensionError
from temde.gradcheck import check_gradients
from temde.tensor import Tensor, no_grad

F64 = np.float64
SEEDS = range(5)


def param(rng, *shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, low + 1.0, size=shape)
    return Tensor(data.astype(F64), requires_grad=True)


def weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # random projection to a scalar so every output entry matters
    return tt.sum_(out * Tensor(w))


def _bn_case(rng, training):
    x, gamma, beta = param(rng, 6, 4), param(rng, 4), param(rng, 4)
    rm, rv = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)

    def f():
        # fresh buffers per call so repeated forward passes agree
        return tt.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training)

    return f, [x, gamma, beta]


def _cases(rng):
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    row = param(rng, 1, 4)
    m1, m2 = param(rng, 4, 5), param(rng, 5, 3)
    pos = param(rng, 3, 4, low=0.5)
    v = param(rng, 2, 3, 4)
    idx = np.array([0, 2, 2, 1])
    bn_train, bn_train_in = _bn_case(rng, True)
    bn_eval, bn_eval_in = _bn_case(rng, False)
    # keep relu/max away from their kinks
    kinked = Tensor(np.where(rng.random((3, 4)) < 0.5, -1, 1) * rng.uniform(0.1, 1.0, (3, 4)), requires_grad=True)
    return {
        "add": (lambda: a + b, [a, b]),
        "add_broadcast": (lambda: a + row, [a, row]),
        "sub": (lambda: a - row, [a, row]),
        "mul": (lambda: a * b, [a, b]),
        "div": (lambda: a / pos, [a, pos]),
        "neg": (lambda: -a, [a]),
        "square": (lambda: tt.square(a), [a]),
        "exp": (lambda: tt.exp(a), [a]),
        "relu": (lambda: tt.relu(kinked), [kinked]),
        "sum_axis": (lambda: tt.sum_(v, axis=1), [v]),
        "mean_axis": (lambda: tt.mean(v, axis=(0, 2)), [v]),
        "max_axis": (lambda: tt.max_(kinked, axis=1), [kinked]),
        "matmul": (lambda: m1 @ m2, [m1, m2]),
        "transpose": (lambda: tt.transpose(v, (2, 0, 1)), [v]),
        "reshape": (lambda: tt.reshape(v, (4, 6)), [v]),
        "broadcast_to": (lambda: tt.broadcast_to(row, (3, 4)), [row]),
        "concat": (lambda: tt.concat([a, b, row], axis=0), [a, b, row]),
        "take": (lambda: tt.take(a, idx), [a]),
        "getitem": (lambda: v[1, :, 1:3], [v]),
        "softmax": (lambda: tt.softmax(v, axis=2), [v]),
        "l2_normalize": (lambda: tt.l2_normalize(a, axis=1), [a]),
        "batch_norm_train": (bn_train, bn_train_in),
        "batch_norm_eval": (bn_eval, bn_eval_in),
    }


OPS = sorted(_cases(np.random.default_rng(0)))


def gradient_errors(op: str, seed: int) -> list[float]:
    """Shared harness: relative FD error for every input of ``op`` at one seed."""
    rng = np.random.default_rng(seed)
    fn, inputs = _cases(rng)[op]
    w = rng.normal(size=fn().shape)
    return check_gradients(lambda: weighted(fn(), w), inputs)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", OPS)
def test_finite_difference_harness(op, seed):
    assert max(gradient_errors(op, seed)) < 1e-6


# -- matmul -------------------------------------------------------------------


def test_matmul_identity_and_small():
    np.testing.assert_array_equal((Tensor([[1.0, 0], [0, 1]]) @ Tensor([[3.0, 4], [5, 6]])).data, [[3, 4], [5, 6]])
    assert (Tensor([[1.0, 2]]) @ Tensor([[3.0], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# -- softmax ------------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(tt.softmax(Tensor(np.zeros(4, F64))).data, [0.25] * 4)
    with np.errstate(over="raise"):
        np.testing.assert_array_equal(tt.softmax(Tensor(np.array([1000.0, 1000.0]))).data, [0.5, 0.5])


def test_softmax_matches_high_precision_oracle():
    # 50-digit decimal evaluation of e^-1 / (e^-1 + e^-4), frozen
    expected = [0.95257412682243321912115184822824779861382056757938,
                0.047425873177566780878848151771752201386179432420609]
    out = tt.softmax(Tensor(np.array([-1.0, -4.0]))).data
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_softmax_axis_out_of_range():
    with pytest.raises(DimensionError):
        tt.softmax(Tensor(np.zeros((2, 2))), axis=2)


@settings(max_examples=100, deadline=None)
@given(arrays(F64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)),
       st.integers(0, 1))
def test_softmax_slices_are_distributions(x, axis):
    out = tt.softmax(Tensor(x), axis=axis).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


# -- batch norm -----------------------------------------------------------------


def _bn(x, training=True, gamma=None, beta=None):
    f = x.shape[1]
    gamma = Tensor(np.ones(f)) if gamma is None else gamma
    beta = Tensor(np.zeros(f)) if beta is None else beta
    rm, rv = np.zeros(f), np.ones(f)
    out = tt.batch_norm(Tensor(x), gamma, beta, rm, rv, training)
    return out, rm, rv


def test_batch_norm_constant_column_maps_to_beta():
    x = np.full((5, 1), 3.0)
    out, _, _ = _bn(x, gamma=Tensor([2.0]), beta=Tensor([0.7]))
    np.testing.assert_allclose(out.data, 0.7)


def test_batch_norm_two_points_population_variance():
    out, _, _ = _bn(np.array([[1.0], [3.0]]))
    # eps shrinks the result slightly: 1 / sqrt(1 + 1e-5)
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], rtol=1e-5)


def test_batch_norm_random_statistics(rng):
    out, _, _ = _bn(rng.normal(3.0, 2.5, size=(32, 10)))
    assert np.all(np.abs(out.data.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(out.data.var(axis=0) - 1.0) < 1e-4)


def test_batch_norm_running_stats_and_eval(rng):
    x = rng.normal(size=(8, 3))
    _, rm, rv = _bn(x)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = tt.batch_norm(Tensor(x), gamma, beta, rm, rv, training=False)
    np.testing.assert_allclose(out.data, (x - rm) / np.sqrt(rv + 1e-5))


def test_batch_norm_single_row_train_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        _bn(np.ones((1, 3)))
    out, _, _ = _bn(np.ones((1, 3)), training=False)
    assert out.shape == (1, 3)


# -- elementwise examples ---------------------------------------------------------


def test_relu_and_l2_examples():
    assert tt.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]
    np.testing.assert_allclose(tt.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    tt.sum_(tt.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_incompatible_shapes_raise():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    with pytest.raises(DimensionError):
        tt.broadcast_to(Tensor(np.ones((2, 3))), (4, 3))
    with pytest.raises(DimensionError):
        tt.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


def test_non_float_input_becomes_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32


# -- backward semantics -------------------------------------------------------------


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_shared_node_visited_once():
    # y = x*x + x: dy/dx = 2x + 1
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = tt.sum_(x * x + x)
    y.backward()
    assert x.grad.tolist() == [7.0]


def test_repeated_backward_accumulates(rng):
    x = param(rng, 4)
    loss = tt.sum_(tt.square(x))
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * first)


def test_backward_is_linear_in_the_loss(rng):
    x = param(rng, 3, 4)
    w = rng.normal(size=(4, 2))

    def l1():
        return tt.sum_(tt.softmax(x @ Tensor(w), axis=1) * Tensor(np.arange(6.0).reshape(3, 2)))

    def l2():
        return tt.sum_(tt.square(x)) * 0.5

    (l1() + l2()).backward()
    joint = x.grad.copy()
    x.zero_grad()
    l1().backward()
    g1 = x.grad.copy()
    x.zero_grad()
    l2().backward()
    np.testing.assert_allclose(joint, g1 + x.grad, rtol=1e-12)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
        assert not tt.is_grad_enabled()
    assert not y.requires_grad
    assert tt.is_grad_enabled()


def test_deep_chain_does_not_hit_recursion_limit():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    tt.sum_(y).backward()
    assert x.grad.tolist() == [1.0]


# -- round trips ------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(arrays(F64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6)))
def test_reshape_and_concat_round_trip(x):
    t = Tensor(x)
    back = tt.reshape(tt.reshape(t, (-1,)), x.shape)
    np.testing.assert_array_equal(back.data, x)
    joined = tt.concat([t[: x.shape[0] // 2], t[x.shape[0] // 2:]], axis=0)
    np.testing.assert_array_equal(joined.data, x)


def test_relu_propagates_nan():
    assert np.isnan(tt.relu(Tensor([np.nan, 1.0])).data[0])
