"""Tests for the Adam and SGD optimizers."""

import numpy as np
import pytest

from metasampler import optim
from metasampler import tensor as T
from metasampler.errors import ContractViolation


def test_zero_gradient_leaves_params_and_advances_counter():
    params = {"w": np.array([1.0, -2.0])}
    state = optim.AdamState()
    updated, state = optim.adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    assert np.array_equal(updated["w"], params["w"])
    assert state.t == 1


def test_missing_gradient_counts_as_zero():
    params = {"w": np.array([1.0]), "b": np.array([2.0])}
    updated, _ = optim.adam_step(params, {"w": np.array([3.0])}, optim.AdamState(), lr=0.1)
    assert np.array_equal(updated["b"], params["b"])
    assert updated["w"][0] < 1.0


def test_first_step_moves_by_lr_times_sign():
    params = {"w": np.array([0.5, 0.5, 0.5])}
    grads = {"w": np.array([3.0, -0.01, 250.0])}
    updated, _ = optim.adam_step(params, grads, optim.AdamState(), lr=1e-3)
    assert np.allclose(updated["w"] - params["w"], -1e-3 * np.sign(grads["w"]), rtol=1e-5)


def test_shape_mismatch_raises():
    with pytest.raises(ContractViolation):
        optim.adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, optim.AdamState(), lr=0.1)
    with pytest.raises(ContractViolation):
        optim.SGD({"w": T.Tensor(np.zeros(3))}).step({"w": np.zeros(2)})


def test_adam_minimizes_squared_norm():
    x = T.Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = optim.Adam({"x": x}, lr=0.1)
    for _ in range(200):
        with T.Tape():
            (g,) = T.grad(T.sum(T.square(x)), [x])
        opt.step({"x": g.data})
    assert np.linalg.norm(x.data) < 1e-3


def test_sgd_step():
    w = T.Tensor(np.array([1.0, 2.0]))
    optim.SGD({"w": w}, lr=0.5).step({"w": np.array([2.0, -2.0])})
    assert np.allclose(w.data, [0.0, 3.0])


def test_make_optimizer():
    params = {"w": T.Tensor(np.zeros(2))}
    assert isinstance(optim.make_optimizer("adam", params, 1e-3), optim.Adam)
    assert isinstance(optim.make_optimizer("sgd", params, 1e-3), optim.SGD)
    with pytest.raises(ContractViolation):
        optim.make_optimizer("rmsprop", params, 1e-3)
