import numpy as np
import pytest

from edgetsn.errors import ContractError, StateError
from edgetsn.graph import OpGraph, backward, finite_difference_check


def test_linear_case_gradient_is_input():
    g = OpGraph()
    w = g.parameter("w", [1.5])
    x = g.input("x")
    g.sum(g.mul(w, x))
    g.forward(x=[3.0])
    assert backward(g)["w"].tolist() == [3.0]


def test_quadratic_fd_is_near_exact():
    g = OpGraph()
    w = g.parameter("w", [2.0])
    g.sum(g.mul(w, w))
    assert float(g.forward()) == 4.0
    assert backward(g)["w"].tolist() == [4.0]
    assert finite_difference_check(g, {}, 1e-5) < 1e-9


def test_zero_upstream_gives_zero_gradients(rng):
    g = OpGraph()
    k = g.parameter("k", rng.normal(size=(2, 1, 3, 3)))
    g.relu(g.conv2d(g.input("x"), k, 1, 1))
    out = g.forward(x=rng.normal(size=(1, 5, 5)))
    grads = backward(g, np.zeros_like(out))
    assert set(grads) == {"k"}
    assert not grads["k"].any()


def test_one_gradient_per_trainable_parameter(rng):
    g = OpGraph()
    a = g.parameter("a", rng.normal(size=(3, 4)))
    b = g.parameter("b", rng.normal(size=3))
    g.parameter("unused", rng.normal(size=2))
    frozen = g.parameter("frozen", rng.normal(size=(3, 4)), trainable=False)
    g.sum(g.affine(g.input("x"), g.add(a, frozen), b))
    g.forward(x=rng.normal(size=(5, 4)))
    grads = backward(g)
    assert set(grads) == {"a", "b", "unused"}
    for name, grad in grads.items():
        assert grad.shape == g.params[name].shape
    assert not grads["unused"].any()


def test_backward_before_forward_is_state_error():
    g = OpGraph()
    g.sum(g.parameter("w", [1.0]))
    with pytest.raises(StateError):
        backward(g)
    with pytest.raises(StateError):
        g.value(0)


def test_non_scalar_loss_needs_explicit_seed(rng):
    g = OpGraph()
    g.relu(g.parameter("w", rng.normal(size=3)))
    g.forward()
    with pytest.raises(ContractError):
        backward(g)
    with pytest.raises(ContractError):
        finite_difference_check(g, {}, 1e-5)


def test_fd_epsilon_range():
    g = OpGraph()
    g.sum(g.parameter("w", [1.0]))
    for eps in (0.0, -1e-5, 0.1):
        with pytest.raises(ContractError):
            finite_difference_check(g, {}, eps)
    assert finite_difference_check(g, {}, 1e-2) < 1e-9


def test_fd_skips_frozen_parameters():
    # a frozen parameter with a deliberately wrong contribution would show up if it were probed
    g = OpGraph()
    w = g.parameter("w", [3.0])
    f = g.parameter("f", [2.0], trainable=False)
    g.sum(g.mul(w, f))
    assert finite_difference_check(g, {}, 1e-5) < 1e-9
    assert g.trainable == ["w"]


def test_nodes_can_only_reference_earlier_nodes():
    g = OpGraph()
    with pytest.raises(ContractError):
        g.apply("relu", 0)
    g.input("x")
    with pytest.raises(ContractError):
        g.apply("relu", 5)
    with pytest.raises(ContractError):
        g.apply("no_such_op", 0)


def test_backward_is_deterministic(rng):
    g = OpGraph()
    k = g.parameter("k", rng.normal(size=(2, 1, 3, 3)))
    g.sum(g.max_pool(g.relu(g.conv2d(g.input("x"), k, 1, 1)), (2, 2)))
    x = rng.normal(size=(1, 6, 6))
    g.forward(x=x)
    a = backward(g)["k"]
    g.forward(x=x)
    assert np.array_equal(a, backward(g)["k"])


def test_missing_input_is_reported():
    g = OpGraph()
    g.relu(g.input("x"))
    with pytest.raises(ContractError):
        g.forward()


def test_doctest_example_in_module():
    import doctest
    from edgetsn import graph
    assert doctest.testmod(graph).failed == 0
