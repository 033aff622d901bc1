"""Adam and plain SGD over dicts of parameter tensors."""

from dataclasses import dataclass, field

import numpy as np

from metasampler import tensor as T
from metasampler.errors import ContractViolation

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class AdamState:
    """Moment estimates keyed by parameter name, plus the step counter."""

    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _as_array(value):
    return value.data if isinstance(value, T.Tensor) else np.asarray(value, dtype=np.float64)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update.

    Args:
        params: Dict name -> numpy array.
        grads: Dict name -> gradient of the same shape (missing names count
            as zero gradients).
        state: AdamState, advanced in place.
        lr: Step size.

    Returns:
        Tuple of (new params dict, state).

    Raises:
        ContractViolation: If a gradient's shape differs from its parameter.
    """
    state.t += 1
    bc1 = 1.0 - BETA1 ** state.t
    bc2 = 1.0 - BETA2 ** state.t
    step_size = lr / bc1

    updated = {}
    for name, value in params.items():
        value = _as_array(value)
        g = grads.get(name)
        g = np.zeros_like(value) if g is None else _as_array(g)
        if g.shape != value.shape:
            raise ContractViolation(f"adam_step: grad for {name} has shape {g.shape}, param {value.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        state.m[name] = BETA1 * state.m[name] + (1.0 - BETA1) * g
        state.v[name] = BETA2 * state.v[name] + (1.0 - BETA2) * (g * g)
        denom = np.sqrt(state.v[name] / bc2) + EPSILON
        updated[name] = value - step_size * state.m[name] / denom
    return updated, state


class Adam:
    """Adam over a dict of tensors, updating ``.data`` in place."""

    def __init__(self, params, lr=1e-3):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def step(self, grads):
        arrays = {name: p.data for name, p in self.params.items()}
        updated, _ = adam_step(arrays, grads, self.state, self.lr)
        for name, value in updated.items():
            self.params[name].data = value


class SGD:
    def __init__(self, params, lr=1e-3):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = _as_array(g)
            if g.shape != p.shape:
                raise ContractViolation(f"sgd: grad for {name} has shape {g.shape}, param {p.shape}")
            p.data = p.data - self.lr * g


def make_optimizer(kind, params, lr):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ContractViolation(f"unknown optimizer {kind!r}")
