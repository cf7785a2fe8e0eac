import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unitprompt import autodiff as ad
from unitprompt.autodiff import ContractError, Graph, Tensor


@pytest.fixture(autouse=True)
def float64():
    with ad.precision(np.float64):
        yield


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), trainable=True)


def test_softmax_of_zeros_is_uniform():
    out = ad.softmax(Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.values, [[0.5, 0.5]])


def test_matmul_with_identity():
    a = np.random.default_rng(0).normal(size=(3, 4))
    out = ad.matmul(Tensor(a), Tensor(np.eye(4)))
    np.testing.assert_array_equal(out.values, a)


def test_cross_entropy_uniform_logits():
    loss = ad.cross_entropy(Tensor([[0.0, 0.0, 0.0, 0.0]]), np.array([2]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_grad_of_sum_is_ones():
    x = Tensor([1.0, -2.0, 3.0], trainable=True)
    with Graph() as g:
        loss = ad.total(x)
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_grad_of_sum_of_squares():
    x = Tensor([1.0, 2.0], trainable=True)
    with Graph() as g:
        loss = ad.total(ad.mul(x, x))
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_twice_is_an_error():
    x = Tensor([1.0], trainable=True)
    with Graph() as g:
        loss = ad.total(x)
    g.backward(loss)
    with pytest.raises(ContractError):
        g.backward(loss)


def test_backward_requires_scalar_from_graph():
    x = Tensor([1.0, 2.0], trainable=True)
    with Graph() as g:
        y = ad.scale(x, 2.0)
    with pytest.raises(ContractError):
        g.backward(y)
    with Graph() as other:
        loss = ad.total(x)
    with pytest.raises(ContractError):
        g.backward(loss)
    other.backward(loss)


def test_frozen_leaf_never_gets_grad():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 3)))
    x = param(rng, 2, 3)
    with Graph() as g:
        loss = ad.total(ad.matmul(x, w))
    g.backward(loss)
    assert w.grad is None
    assert x.grad is not None


def test_no_recording_without_trainable_inputs():
    with Graph() as g:
        out = ad.total(ad.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))))
    assert not out.requires_grad
    with pytest.raises(ContractError):
        g.backward(out)


def test_shape_mismatch_names_primitive():
    with pytest.raises(ContractError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ContractError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_random_three_op_graph_matches_finite_differences():
    rng = np.random.default_rng(2)
    a, b, c = param(rng, 3, 4), param(rng, 4, 2), param(rng, 3, 2)
    err = ad.grad_check(lambda: ad.total(ad.mul(ad.add(ad.matmul(a, b), c), c)), [a, b, c])
    assert err <= 1e-6


def test_quadratic_form_grad_check():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(4, 4))
    q = Tensor(m @ m.T)
    x = param(rng, 1, 4)
    err = ad.grad_check(lambda: ad.total(ad.mul(ad.matmul(x, q), x)), [x])
    assert err <= 1e-8


def test_constant_function_has_zero_grad():
    x = param(np.random.default_rng(4), 3)
    assert ad.grad_check(lambda: Tensor(1.5), [x]) == 0.0


def test_grad_check_preconditions():
    x = Tensor(np.ones(2, dtype=np.float32), trainable=True, dtype=np.float32)
    with pytest.raises(ContractError):
        ad.grad_check(lambda: ad.total(x), [x])
    y = param(np.random.default_rng(5), 2)
    with pytest.raises(ContractError):
        ad.grad_check(lambda: ad.total(y), [y], eps=1e-2)


def test_grad_check_reports_non_finite_coordinate():
    x = Tensor([1.0, 0.0], trainable=True)

    def fn():
        if x.values[1] != 0.0:
            return Tensor(np.inf)
        return ad.total(x)

    with pytest.raises(FloatingPointError, match="coordinate 1"):
        ad.grad_check(fn, [x])


PRIMITIVES = {
    "matmul": lambda rng: (lambda a, b: ad.matmul(a, b), [param(rng, 2, 3, 4), param(rng, 4, 5)]),
    "matmul_tb": lambda rng: (lambda a, b: ad.matmul(a, b, transpose_b=True),
                              [param(rng, 2, 3, 4), param(rng, 2, 5, 4)]),
    "add": lambda rng: (ad.add, [param(rng, 2, 3, 4), param(rng, 3, 4)]),
    "mul": lambda rng: (ad.mul, [param(rng, 2, 3), param(rng, 2, 3)]),
    "scale": lambda rng: (lambda a: ad.scale(a, -1.7), [param(rng, 3, 2)]),
    "concat": lambda rng: (ad.concat_rows, [param(rng, 2, 4), param(rng, 3, 4)]),
    "slice": lambda rng: (lambda a: ad.slice_rows(a, 1, 3), [param(rng, 4, 3)]),
    "softmax": lambda rng: (lambda a: ad.softmax(a, np.triu(np.full((3, 3), ad.MASK_VALUE), 1)), [param(rng, 2, 3, 3)]),
    "layer_norm": lambda rng: (ad.layer_norm, [param(rng, 3, 5), param(rng, 5), param(rng, 5)]),
    "embedding": lambda rng: (lambda t: ad.embedding(t, np.array([[0, 2, 2], [1, 0, 3]])), [param(rng, 4, 3)]),
    "gelu": lambda rng: (ad.gelu, [param(rng, 3, 4)]),
    "heads": lambda rng: (lambda a: ad.merge_heads(ad.split_heads(ad.gelu(a), 2)), [param(rng, 2, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_vjp_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    op, params = PRIMITIVES[name](rng)
    weights = Tensor(rng.normal(size=op(*params).shape))
    err = ad.grad_check(lambda: ad.total(ad.mul(op(*params), weights)), params)
    assert err <= 1e-6


def test_cross_entropy_vjp_with_mask():
    rng = np.random.default_rng(6)
    logits = param(rng, 2, 3, 5)
    targets = np.array([[1, 4, 0], [2, 2, 3]])
    mask = np.array([[1, 0, 1], [0, 1, 1]], dtype=float)
    assert ad.grad_check(lambda: ad.cross_entropy(logits, targets, mask), [logits]) <= 1e-6


def test_cross_entropy_ignores_masked_positions():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(1, 3, 4))
    targets = np.array([[0, 1, 2]])
    mask = np.array([[0.0, 1.0, 1.0]])
    base = ad.cross_entropy(Tensor(logits), targets, mask).item()
    logits[0, 0] += 100.0
    assert ad.cross_entropy(Tensor(logits), targets, mask).item() == base


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-50, 50), min_size=1, max_size=6), min_size=1, max_size=4)
       .filter(lambda rows: len({len(r) for r in rows}) == 1))
def test_softmax_rows_are_distributions(rows):
    out = ad.softmax(Tensor(rows)).values
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


def test_identical_runs_give_bit_identical_grads():
    def run():
        rng = np.random.default_rng(8)
        a, b = param(rng, 3, 4), param(rng, 4, 4)
        with Graph() as g:
            loss = ad.total(ad.gelu(ad.layer_norm(ad.matmul(a, b), Tensor(np.ones(4)), Tensor(np.zeros(4)))))
        g.backward(loss)
        return a.grad.tobytes() + b.grad.tobytes()

    assert run() == run()


def test_grads_accumulate_across_graphs():
    x = Tensor([1.0, 2.0], trainable=True)
    for _ in range(2):
        with Graph() as g:
            loss = ad.total(x)
        g.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_default_precision_is_float32():
    with ad.precision(np.float32):
        assert Tensor([1.0]).values.dtype == np.float32
    assert Tensor([1.0]).values.dtype == np.float64
