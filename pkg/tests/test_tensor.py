"""Tests for the autodiff tensor engine."""

import numpy as np
import pytest

from metasampler import tensor as T
from metasampler.errors import ContractViolation, FormatError, TensorIndexError


TRIALS = 100


def _check(f, x):
    """Gradient check at the default 1e-12 floor; inputs must keep gradients away from zero."""
    return T.grad_check(f, x, eps=1e-5)


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_elementwise_values():
    a = T.Tensor([1.0, 2.0, 3.0])
    b = T.Tensor([4.0, 5.0, 6.0])
    assert np.allclose(T.add(a, b).data, [5.0, 7.0, 9.0])
    assert np.allclose(T.sub(a, b).data, [-3.0, -3.0, -3.0])
    assert np.allclose(T.mul(a, b).data, [4.0, 10.0, 18.0])
    assert np.allclose(T.scale(a, 2.0).data, [2.0, 4.0, 6.0])
    assert np.allclose((1.0 - a).data, [0.0, -1.0, -2.0])


def test_shape_mismatch_raises():
    with pytest.raises(ContractViolation):
        T.add(T.Tensor([1.0, 2.0]), T.Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ContractViolation):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_gather_out_of_range():
    with pytest.raises(TensorIndexError):
        T.gather(T.Tensor(np.ones((3, 2))), [0, 3])
    # also an IndexError for callers that only know the builtin
    with pytest.raises(IndexError):
        T.gather(T.Tensor(np.ones(3)), [-1])


def test_max_ties_go_to_lowest_index():
    value, idx = T.max(T.Tensor([1.0, 3.0, 3.0, 2.0]))
    assert value.item() == 3.0
    assert idx == 1
    value, idx = T.min(T.Tensor([[2.0, 1.0, 1.0], [0.0, 5.0, 0.0]]), axis=1)
    assert list(idx) == [1, 0]


def test_softmax_rows_sum_to_one():
    x = T.Tensor(_rng().normal(size=(4, 5)) * 10.0)
    out = T.softmax(x)
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("name, fn, domain", [
    ("exp", lambda x: T.sum(T.exp(x)), "any"),
    ("log", lambda x: T.sum(T.log(x)), "positive"),
    ("sqrt", lambda x: T.sum(T.sqrt(x)), "positive"),
    ("square", lambda x: T.sum(T.square(x)), "any"),
    ("sin", lambda x: T.sum(T.sin(x)), "any"),
    ("cos", lambda x: T.sum(T.cos(x)), "any"),
    ("neg", lambda x: T.sum(T.mul(T.neg(x), x)), "any"),
    ("relu", lambda x: T.sum(T.mul(T.relu(x), x)), "away_from_zero"),
    ("sigmoid", lambda x: T.sum(T.sigmoid(x)), "any"),
    ("mean", lambda x: T.mean(T.square(x)), "any"),
    ("clip", lambda x: T.sum(T.square(T.clip(x, -0.5, 0.5))), "away_from_bounds"),
])
def test_unary_gradients(name, fn, domain):
    rng = _rng(sum(map(ord, name)))
    for _ in range(TRIALS):
        x = rng.normal(size=6)
        if domain == "positive":
            x = np.abs(x) + 0.5
        elif domain == "away_from_bounds":
            x = rng.choice([-1.0, 1.0], size=6) * rng.uniform(0.1, 0.4, size=6)
            x[:2] = [0.8, -0.9]
        else:
            # square, neg, cos and mean have a zero gradient at the origin
            x = np.sign(x) * (np.abs(x) + 0.1)
        assert _check(fn, x) < 1e-6, name


def test_binary_and_structural_gradients():
    rng = _rng(1)
    for _ in range(TRIALS):
        b = T.Tensor(rng.normal(size=(3, 4)))
        c = T.Tensor(rng.normal(size=(5, 3)))
        weights = T.Tensor(rng.normal(size=(2, 4)))
        x = rng.normal(size=(2, 3))
        x = np.sign(x) * (np.abs(x) + 0.1)

        assert _check(lambda t: T.sum(T.square(T.matmul(t, b))), x) < 1e-6
        assert _check(lambda t: T.sum(T.pairwise_sq_dist(t, c)), x) < 1e-6
        assert _check(lambda t: T.sum(T.mul(T.softmax(T.matmul(t, b)), weights)), x) < 1e-6
        assert _check(lambda t: T.sum(T.square(T.transpose(t))), x) < 1e-6
        assert _check(lambda t: T.sum(T.square(T.reshape(t, (3, 2)))), x) < 1e-6
        assert _check(lambda t: T.sum(T.square(T.concat([t, t], axis=1))), x) < 1e-6
        assert _check(lambda t: T.sum(T.square(T.concat([t, T.Tensor(np.ones((1, 3)))], axis=0))), x) < 1e-6
        assert _check(lambda t: T.sum(T.square(T.gather(t, [1, 1, 0]))), x) < 1e-6
        assert _check(lambda t: T.sum(T.sum(t, axis=0)), x) < 1e-6
        assert _check(lambda t: T.scale(T.sum(T.square(t)), T.reshape(T.gather(T.reshape(t, (6,)), [0]), ())),
                      x) < 1e-6


def test_max_min_gradients_at_distinct_values():
    x = np.array([[0.1, 0.7, -0.3], [1.2, -0.4, 0.5]])
    assert _check(lambda t: T.sum(T.max(t, axis=1)[0]), x) < 1e-6
    assert _check(lambda t: T.sum(T.min(t, axis=0)[0]), x) < 1e-6
    assert _check(lambda t: T.max(t)[0], x) < 1e-6


def test_backward_accumulates_into_leaves():
    with T.Tape():
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        y = T.sum(T.square(x))
        T.backward(y)
        assert np.allclose(x.grad, [2.0, 4.0])
        T.backward(T.sum(T.square(x)))
    assert np.allclose(x.grad, [4.0, 8.0])


def test_gradient_accumulates_over_consumers():
    with T.Tape():
        x = T.Tensor(2.0, requires_grad=True)
        (g,) = T.grad(T.add(T.mul(x, x), x), [x])
    assert g.item() == 5.0

    rng = _rng(2)
    for _ in range(20):
        value = rng.normal(size=4)
        w = T.Tensor(rng.normal(size=4))
        with T.Tape():
            x = T.Tensor(value, requires_grad=True)
            (both,) = T.grad(T.add(T.sum(T.exp(x)), T.sum(T.mul(w, x))), [x])
        with T.Tape():
            x = T.Tensor(value, requires_grad=True)
            (first,) = T.grad(T.sum(T.exp(x)), [x])
        with T.Tape():
            x = T.Tensor(value, requires_grad=True)
            (second,) = T.grad(T.sum(T.mul(w, x)), [x])
        assert np.allclose(both.data, first.data + second.data, rtol=1e-12, atol=0.0)


def test_backward_requires_scalar_root():
    with T.Tape():
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractViolation):
            T.backward(T.square(x))


def test_grad_returns_zeros_for_unreached_inputs():
    with T.Tape():
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        unused = T.Tensor([3.0], requires_grad=True)
        gx, gu = T.grad(T.sum(T.square(x)), [x, unused])
    assert np.allclose(gx.data, [2.0, 4.0])
    assert np.allclose(gu.data, [0.0])


def test_double_backward_of_cube():
    with T.Tape():
        x = T.Tensor([0.5, -1.5, 2.0], requires_grad=True)
        y = T.sum(T.mul(T.mul(x, x), x))
        (g,) = T.grad(y, [x], create_graph=True)
        assert np.allclose(g.data, 3.0 * x.data ** 2)
        (h,) = T.grad(T.sum(g), [x])
    assert np.allclose(h.data, 6.0 * x.data)


def test_no_grad_records_nothing():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        with T.no_grad():
            y = T.exp(x)
        assert len(tape) == 0
    assert not y.requires_grad
    assert y.is_leaf


def test_tape_scopes_nodes():
    with T.Tape() as tape:
        x = T.Tensor([1.0], requires_grad=True)
        T.exp(T.exp(x))
    assert len(tape) == 2
    assert T.active_tape() is not tape


def test_tensor_bytes_round_trip():
    original = T.Tensor(np.arange(6, dtype=float).reshape(2, 3) / 7.0)
    scalar = T.Tensor(0.25)
    buf = T.tensor_to_bytes(original) + T.tensor_to_bytes(scalar)
    first, offset = T.tensor_from_bytes(buf)
    second, end = T.tensor_from_bytes(buf, offset)
    assert np.array_equal(first.data, original.data)
    assert second.shape == () and second.item() == 0.25
    assert end == len(buf)


def test_tensor_bytes_rejects_bad_input():
    with pytest.raises(FormatError):
        T.tensor_from_bytes(b"XXXX\x00\x00\x00\x00")
    buf = T.tensor_to_bytes(T.Tensor(np.ones(4)))
    with pytest.raises(FormatError):
        T.tensor_from_bytes(buf[:-3])
