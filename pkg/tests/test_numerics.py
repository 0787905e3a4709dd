from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmae import numerics as nx
from dualmae.errors import ContractError, NonFiniteError, ShapeError
from dualmae.numerics import Rng, Tensor, grad_check


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


def test_matmul_identity_and_hand_values():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(Tensor(np.eye(2)), b).data, b.data)
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_matches_central_difference():
    a, b = rand((5, 4), 1), rand((4, 3), 2)
    assert grad_check(lambda x: nx.tsum(nx.matmul(x, b)), a) < 1e-6
    assert grad_check(lambda x: nx.tsum(nx.matmul(a, x)), b) < 1e-6


def test_batched_matmul_grad():
    a, b = rand((2, 3, 4), 3), rand((2, 4, 5), 4)
    w = np.random.default_rng(5).normal(size=(2, 3, 5))
    assert grad_check(lambda x: nx.tsum(nx.mul(nx.matmul(x, b), Tensor(w))), a) < 1e-6
    assert grad_check(lambda x: nx.tsum(nx.mul(nx.matmul(a, x), Tensor(w))), b) < 1e-6


def test_layer_norm_examples():
    one = Tensor(np.ones(3))
    zero = Tensor(np.zeros(3))
    assert np.allclose(nx.layer_norm(Tensor([[1.0, 1.0, 1.0]]), one, zero).data, 0.0)
    out = nx.layer_norm(Tensor([[0.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]])
    with pytest.raises(ShapeError):
        nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_layer_norm_grads():
    x, g, b = rand((3, 8), 1), rand(8, 2), rand(8, 3)
    w = Tensor(np.random.default_rng(9).normal(size=(3, 8)))
    assert grad_check(lambda t: nx.tsum(nx.mul(nx.layer_norm(t, g, b), w)), x) < 1e-5
    assert grad_check(lambda t: nx.tsum(nx.mul(nx.layer_norm(x, t, b), w)), g) < 1e-5
    assert grad_check(lambda t: nx.tsum(nx.mul(nx.layer_norm(x, g, t), w)), b) < 1e-5
    rows = nx.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.abs(rows.mean(axis=-1)).max() < 1e-10


def test_softmax_examples_and_stability():
    assert np.allclose(nx.softmax(Tensor(np.zeros(4))).data, 0.25)
    assert np.allclose(nx.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    x = rand((2, 6), 4)
    w = Tensor(np.random.default_rng(1).normal(size=(2, 6)))
    assert grad_check(lambda t: nx.tsum(nx.mul(nx.softmax(t), w)), x) < 1e-5
    assert np.abs(nx.softmax(x).data.sum(axis=-1) - 1).max() < 1e-12


def test_log_softmax_matches_log_of_softmax():
    x = rand((3, 5), 8)
    assert np.allclose(nx.log_softmax(x).data, np.log(nx.softmax(x).data))
    w = Tensor(np.random.default_rng(2).normal(size=(3, 5)))
    assert grad_check(lambda t: nx.tsum(nx.mul(nx.log_softmax(t), w)), x) < 1e-5


def test_gelu_and_misc_grads():
    assert nx.gelu(Tensor([0.0])).data[0] == 0.0
    x = rand((3, 4), 6)
    w = Tensor(np.random.default_rng(3).normal(size=(4, 3)))
    cases = [
        lambda t: nx.tsum(nx.mul(nx.gelu(t), t)),
        lambda t: nx.tsum(nx.mul(nx.transpose(t), w)),
        lambda t: nx.tsum(nx.mul(nx.reshape(t, (4, 3)), w)),
        lambda t: nx.tsum(nx.mul(nx.scale(t, 3.0), t)),
        lambda t: nx.tsum(nx.mul(nx.add(t, Tensor(np.arange(4.0))), t)),
        lambda t: nx.tsum(nx.mul(nx.concat([t, nx.scale(t, 2.0)], axis=0), nx.concat([t, t], axis=0))),
        lambda t: nx.tsum(nx.mul(nx.mean(t, axis=0), nx.mean(t, axis=0))),
        lambda t: nx.tsum(nx.mul(nx.gather(t, [2, 0, 2]), nx.gather(t, [1, 1, 0]))),
        lambda t: nx.tsum(nx.mul(nx.scatter(t, [4, 0, 2], 5), nx.scatter(t, [4, 0, 2], 5))),
        lambda t: nx.tsum(nx.mul(nx.sub(t, nx.scale(t, 0.5)), t)),
    ]
    for f in cases:
        assert grad_check(f, x) < 1e-4


def test_gather_reorders_and_scatter_round_trip():
    x = Tensor(np.arange(12.0).reshape(4, 3))
    assert np.array_equal(nx.gather(x, [2, 0]).data, x.data[[2, 0]])
    idx = [3, 1]
    back = nx.gather(nx.scatter(nx.gather(x, idx), idx, 4), idx)
    assert np.array_equal(back.data, x.data[idx])
    with pytest.raises(IndexError):
        nx.gather(x, [4])
    with pytest.raises(IndexError):
        nx.scatter(x, [0, 1, 2, 9], 5)


def test_only_trailing_broadcast_allowed():
    nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        nx.scale(Tensor([1e308]), 10.0)


def test_grad_check_contract():
    x = Tensor([1.0, 2.0], requires_grad=True)
    # dyadic inputs and step keep the central difference exact
    assert grad_check(lambda t: nx.tsum(t), x, h=2.0**-16) == 0.0
    assert grad_check(lambda t: nx.tsum(t), x) < 1e-9
    assert grad_check(lambda t: nx.tsum(nx.mul(t, t)), x) < 1e-8
    with pytest.raises(ContractError):
        grad_check(lambda t: t, x)
    with pytest.raises(ContractError):
        grad_check(lambda t: nx.tsum(t), x, h=0.0)


def test_backward_accumulates_shared_leaf():
    x = Tensor([3.0], requires_grad=True)
    y = nx.add(nx.mul(x, x), x)
    y.backward()
    assert x.grad.tolist() == [7.0]


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with nx.no_grad():
        y = nx.mul(x, x)
    assert not y.requires_grad


def test_rng_split_is_order_independent():
    a = Rng(7)
    first = a.split("mask").uniform(size=4)
    a.uniform(size=100)
    assert np.array_equal(a.split("mask").uniform(size=4), first)
    assert not np.array_equal(a.split("init").uniform(size=4), first)
    assert np.array_equal(Rng(7).split("x", 3).normal(size=5), Rng(7).split("x", 3).normal(size=5))


def test_rng_choice_sorted_unique():
    picks = Rng(1).choice(50, 20)
    assert len(set(picks.tolist())) == 20
    assert np.all(np.diff(picks) > 0)


def test_trunc_normal_bounded():
    v = Rng(2).trunc_normal((1000,), std=0.02)
    assert np.abs(v).max() <= 0.04


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_layer_norm_chain_grad(m, k, seed):
    x = rand((m, k + 1), seed)
    w = rand((k + 1, 3), seed + 1)
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert grad_check(lambda t: nx.tsum(nx.gelu(nx.layer_norm(nx.matmul(t, w), g, b))), x) < 1e-4
