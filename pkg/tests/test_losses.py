"""Tests for task losses and the sampler objective."""

import math

import numpy as np
import pytest

from metasampler import data
from metasampler import geometry
from metasampler import losses
from metasampler import models
from metasampler import tensor as T
from metasampler.config import DatasetSpec, LossWeights
from metasampler.errors import ContractViolation

M = 16


def _dataset():
    return data.gen_dataset(DatasetSpec(m=M, train_per_class=2, val_per_class=1, test_per_class=1, seed=3))


def _check(f, x):
    return T.grad_check(f, x, eps=1e-5, floor=1e-2)


def test_classification_uniform_logits():
    loss = losses.loss_classification(T.zeros((8,)), 3)
    assert loss.item() == pytest.approx(math.log(8.0), abs=1e-12)


def test_classification_confident_logit_goes_to_zero():
    logits = np.zeros(8)
    logits[2] = 60.0
    assert losses.loss_classification(T.Tensor(logits), 2).item() < 1e-20


def test_classification_bce_variant():
    loss = losses.loss_classification(T.zeros((8,)), 0, bce=True)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_classification_rejects_bad_label():
    with pytest.raises(ContractViolation):
        losses.loss_classification(T.zeros((8,)), 8)
    with pytest.raises(ContractViolation):
        losses.loss_classification(T.zeros((8,)), -1)


def test_classification_gradients():
    x = np.random.default_rng(0).normal(size=8)
    assert _check(lambda t: losses.loss_classification(t, 5), x) < 1e-6
    assert _check(lambda t: losses.loss_classification(t, 5, bce=True), x) < 1e-6


def test_retrieval_values():
    assert losses.loss_retrieval(T.Tensor(0.9), True).item() == pytest.approx(-math.log(0.9), abs=1e-12)
    assert losses.loss_retrieval(T.Tensor(0.5), False).item() == pytest.approx(math.log(2.0), abs=1e-12)
    assert losses.loss_retrieval(T.Tensor(0.5), True).item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_retrieval_clamps_saturated_scores():
    assert losses.loss_retrieval(T.Tensor(0.0), True).item() == pytest.approx(-math.log(1e-12))
    assert losses.loss_retrieval(T.Tensor(1.0), False).item() == pytest.approx(-math.log(1e-12), rel=1e-3)


def test_retrieval_gradient():
    assert _check(lambda s: losses.loss_retrieval(T.reshape(s, ()), True), np.array([0.3])) < 1e-6
    assert _check(lambda s: losses.loss_retrieval(T.reshape(s, ()), False), np.array([0.7])) < 1e-6


def test_reconstruction_matches_chamfer():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
    assert losses.loss_reconstruction(T.Tensor(a), b).item() == geometry.chamfer_value(a, b)
    assert losses.loss_reconstruction(T.Tensor(b), b).item() == 0.0


def test_pose_loss_zero_at_ground_truth():
    rng = np.random.default_rng(2)
    source = rng.normal(size=(9, 3))
    euler, t = np.array([30.0, -10.0, 5.0]), np.array([0.2, 0.4, -0.1])
    template = geometry.apply_rigid(source, euler, t)
    loss = losses.loss_pose((T.Tensor(euler), T.Tensor(t)), source, template)
    assert loss.item() == pytest.approx(0.0, abs=1e-20)
    identity = losses.loss_pose((T.zeros((3,)), T.zeros((3,))), source, source)
    assert identity.item() == 0.0


def test_pose_loss_gradient():
    rng = np.random.default_rng(3)
    source = rng.normal(size=(6, 3))
    template = geometry.apply_rigid(source, [10.0, 20.0, -15.0], [0.1, 0.1, 0.0])
    t = T.Tensor([0.05, 0.0, 0.1])
    assert _check(lambda e: losses.loss_pose((e, t), source, template), np.array([4.0, 9.0, -2.0])) < 1e-6


def test_simplification_line_case():
    line = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    loss = losses.loss_simplification(T.Tensor([[0.0, 0.0, 0.0]]), line)
    assert loss.item() == pytest.approx(3.5)
    assert losses.loss_simplification(T.Tensor(line), line).item() == 0.0


def test_simplification_weights_and_gradient():
    line = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    q = T.Tensor([[0.5, 0.0, 0.0], [4.0, 0.0, 0.0]])
    # nearest: 0.25 and 1.0; coverage: 0.25, 0.25, 2.25, 1.0
    assert losses.loss_simplification(q, line, gamma_max=0.0, gamma_cov=0.0).item() == pytest.approx(0.625)
    assert losses.loss_simplification(q, line, gamma_max=2.0, gamma_cov=0.0).item() == pytest.approx(2.625)
    assert losses.loss_simplification(q, line).item() == pytest.approx(2.5625)
    rng = np.random.default_rng(4)
    cloud = rng.normal(size=(8, 3))
    assert _check(lambda t: losses.loss_simplification(t, cloud), rng.normal(size=(3, 3))) < 1e-6


def test_projection_is_temperature_squared():
    assert losses.loss_projection(T.Tensor(math.log(0.1))).item() == pytest.approx(0.01)
    sampler = models.init_sampler(4, m=M, temperature=1.0)
    assert losses.loss_projection(sampler).item() == pytest.approx(1.0)


def test_projection_descent_lowers_temperature():
    log_t = T.Tensor(0.0, requires_grad=True)
    with T.Tape():
        (g,) = T.grad(losses.loss_projection(log_t), [log_t])
    assert g.item() > 0.0


def test_total_loss_weighting():
    task, simp, proj = T.Tensor(2.0), T.Tensor(3.0), T.Tensor(4.0)
    assert losses.loss_total(task, simp, proj, LossWeights()).item() == 9.0
    zero = LossWeights(w_task=0.0, w_simp=0.0, w_proj=0.0)
    assert losses.loss_total(task, simp, proj, zero).item() == 0.0
    with pytest.raises(ContractViolation):
        losses.loss_total(task, simp, proj, LossWeights(w_simp=-1.0))


def test_joint_loss_is_sum_over_pool():
    dataset = _dataset()
    batch = data.make_examples("classification", dataset, "train")[:4]
    sampler = models.init_sampler(4, m=M, seed=1)
    model = models.init_task_model("classification", 7, m=M).freeze()
    single = losses.loss_sampler_task_single(sampler, model, batch).item()
    joint = losses.loss_sampler_task_joint(sampler, [model, model, model], batch).item()
    assert single >= 0.0
    assert joint == pytest.approx(3.0 * single, rel=1e-12)


def test_joint_gradient_is_sum_of_single_gradients():
    dataset = _dataset()
    batch = data.make_examples("reconstruction", dataset, "train")[:3]
    sampler = models.clone_sampler(models.init_sampler(4, m=M, seed=2), requires_grad=True)
    pool = [models.init_task_model("reconstruction", s, m=M).freeze() for s in (1, 2)]
    target = sampler.params["gen.1.w"]
    with T.Tape():
        (joint,) = T.grad(losses.loss_sampler_task_joint(sampler, pool, batch), [target])
        singles = [T.grad(losses.loss_sampler_task_single(sampler, m, batch), [target])[0] for m in pool]
    assert np.any(joint.data != 0.0)
    assert np.allclose(joint.data, singles[0].data + singles[1].data, rtol=1e-12, atol=1e-15)


def test_sampler_loss_rejects_unfrozen_and_mixed_pools():
    dataset = _dataset()
    batch = data.make_examples("classification", dataset, "train")[:2]
    sampler = models.init_sampler(4, m=M)
    with pytest.raises(ContractViolation):
        losses.loss_sampler_task_single(sampler, models.init_task_model("classification", 1, m=M), batch)
    mixed = [models.init_task_model("classification", 1, m=M).freeze(),
             models.init_task_model("reconstruction", 2, m=M).freeze()]
    with pytest.raises(ContractViolation):
        losses.loss_sampler_task_joint(sampler, mixed, batch)


def test_sample_batch_pairs():
    dataset = _dataset()
    sampler = models.init_sampler(4, m=M, seed=5)
    with T.no_grad():
        retrieval = losses.sample_batch(sampler, "retrieval", data.make_examples("retrieval", dataset, "train")[:2])
        pose = losses.sample_batch(sampler, "pose_regression",
                                   data.make_examples("pose_regression", dataset, "train")[:2])
    (query, other), outputs = retrieval[0]
    assert query.shape == (4, 3) and other.shape == (M, 3)
    assert len(outputs) == 1
    (source, template), outputs = pose[0]
    assert source.shape == (4, 3) and template.shape == (4, 3)
    assert len(outputs) == 2


def test_sampler_objective_components():
    dataset = _dataset()
    batch = data.make_examples("pose_regression", dataset, "train")[:2]
    sampler = models.init_sampler(4, m=M, seed=6)
    pool = [models.init_task_model("pose_regression", 3, m=M).freeze()]
    with T.no_grad():
        parts = losses.sampler_objective(sampler, pool, batch, LossWeights(w_task=2.0))
    values = {k: v.item() for k, v in parts.items()}
    assert all(v >= 0.0 for v in values.values())
    assert values["total"] == pytest.approx(2.0 * values["task"] + values["simp"] + values["proj"])
