"""Task losses, sampler losses (single and joint), simplification and projection."""

import numpy as np

from metasampler import geometry
from metasampler import models
from metasampler import tensor as T
from metasampler.errors import ContractViolation

PROB_CLAMP = 1e-12

# Pair tasks where the second cloud is also fed through the sampler
_SAMPLE_BOTH = {"retrieval": False, "pose_regression": True}


def loss_classification(logits, label, bce=False):
    """Softmax cross-entropy -log p_label, or mean one-vs-rest BCE when ``bce``.

    Raises:
        ContractViolation: If ``label`` is outside ``[0, C)``.
    """
    classes = logits.shape[0]
    if not 0 <= int(label) < classes:
        raise ContractViolation(f"loss_classification: label {label} outside [0, {classes})")
    if bce:
        onehot = np.zeros((classes, 2))
        onehot[:, 0] = 1.0
        onehot[int(label)] = (0.0, 1.0)
        column = T.reshape(logits, (classes, 1))
        probs = T.softmax(T.concat([T.zeros((classes, 1)), column], axis=1))
        log_probs = T.log(T.clip(probs, PROB_CLAMP, 1.0))
        return T.neg(T.scale(T.sum(T.mul(log_probs, T.Tensor(onehot))), 1.0 / classes))
    peak = float(np.max(logits.data))
    shifted = T.sub(logits, T.Tensor(np.full(classes, peak)))
    log_norm = T.log(T.sum(T.exp(shifted)))
    picked = T.reshape(T.gather(shifted, [int(label)]), ())
    return T.sub(log_norm, picked)


def loss_reconstruction(predicted, cloud):
    """Two-way Chamfer distance between a reconstruction and its input."""
    return geometry.chamfer_distance(predicted, cloud)


def loss_retrieval(score, is_match):
    """Binary cross-entropy of a match probability; ``score`` is clamped to [1e-12, 1-1e-12]."""
    clamped = T.clip(score, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if is_match:
        return T.neg(T.log(clamped))
    return T.neg(T.log(T.sub(T.ones(clamped.shape), clamped)))


def loss_pose(pred, source, template):
    """Chamfer distance between the transformed source and the template.

    Args:
        pred: ``(euler_deg, t)`` tensors of shape ``(3,)``.
        source: ``(m, 3)`` source cloud.
        template: ``(m, 3)`` template cloud.
    """
    euler, t = pred
    return geometry.chamfer_distance(geometry.apply_rigid_tensor(source, euler, t), template)


def task_loss(model, example, inputs, params=None):
    """Loss of ``model`` on ``inputs`` against the ground truth of ``example``.

    Args:
        model: TaskModel.
        example: Example dict (``cloud`` plus ``label``/``other``/``match``).
        inputs: What the model sees: a cloud, or a pair for pair tasks
            (possibly sampled versions of the example's clouds).
        params: Optional task-model parameter override.
    """
    kind = model.task_kind
    out = models.task_forward(model, inputs, params)
    if kind == "classification":
        return loss_classification(out, example["label"], bce=model.classification_loss == "bce")
    if kind == "reconstruction":
        return loss_reconstruction(out, example["cloud"])
    if kind == "retrieval":
        return loss_retrieval(out, bool(example["match"]))
    return loss_pose(out, example["cloud"], example["other"])


def sample_batch(sampler, kind, batch, params=None):
    """Run the sampler over every cloud a task needs sampled.

    Returns:
        List of ``(model_inputs, [(SamplerOutput, input_cloud), ...])`` per
        example; the second element feeds the simplification loss.
    """
    results = []
    for example in batch:
        first = models.sampler_forward(sampler, example["cloud"], params)
        outputs = [(first, example["cloud"])]
        if kind not in models.PAIR_KINDS:
            results.append((first.soft, outputs))
            continue
        if _SAMPLE_BOTH[kind]:
            second = models.sampler_forward(sampler, example["other"], params)
            outputs.append((second, example["other"]))
            results.append(((first.soft, second.soft), outputs))
        else:
            results.append(((first.soft, example["other"]), outputs))
    return results


def _batch_mean(values):
    total = values[0]
    for value in values[1:]:
        total = T.add(total, value)
    return T.scale(total, 1.0 / len(values))


def _check_pool(pool):
    pool = list(pool)
    if not pool:
        raise ContractViolation("sampler task loss needs at least one model")
    kinds = {m.task_kind for m in pool}
    if len(kinds) != 1:
        raise ContractViolation(f"joint loss over mixed task kinds: {sorted(kinds)}")
    for model in pool:
        models.require_frozen(model)
    return pool


def loss_sampler_task_single(sampler, model, batch, params=None, samples=None):
    """Batch-mean task loss of one frozen model on soft-sampled clouds."""
    return loss_sampler_task_joint(sampler, [model], batch, params=params, samples=samples)


def loss_sampler_task_joint(sampler, pool, batch, params=None, samples=None):
    """Sum over the pool of batch-mean task losses on soft-sampled clouds.

    Args:
        sampler: SamplerModel.
        pool: Frozen TaskModels of a single task kind.
        batch: List of example dicts.
        params: Optional sampler parameter override.
        samples: Precomputed ``sample_batch`` output to reuse.

    Raises:
        ContractViolation: On unfrozen models or mixed task kinds.
    """
    pool = _check_pool(pool)
    if not batch:
        raise ContractViolation("sampler task loss needs a nonempty batch")
    if samples is None:
        samples = sample_batch(sampler, pool[0].task_kind, batch, params)
    total = None
    for model in pool:
        per_example = [task_loss(model, ex, inputs) for ex, (inputs, _) in zip(batch, samples)]
        loss = _batch_mean(per_example)
        total = loss if total is None else T.add(total, loss)
    return total


def loss_simplification(generated, cloud, gamma_max=1.0, gamma_cov=1.0):
    """Keep generated points near the input and covering it.

    L = mean_q min_p |q-p|^2 + gamma_max * max_q min_p |q-p|^2
        + gamma_cov * mean_p min_q |p-q|^2
    """
    q = generated if isinstance(generated, T.Tensor) else T.Tensor(generated)
    p = cloud if isinstance(cloud, T.Tensor) else T.Tensor(cloud)
    if q.shape[0] == 0 or p.shape[0] == 0:
        raise ContractViolation("loss_simplification: empty cloud")
    dist = T.pairwise_sq_dist(q, p)
    nearest, _ = T.min(dist, axis=1)
    coverage, _ = T.min(dist, axis=0)
    worst, _ = T.max(nearest)
    loss = T.add(T.mean(nearest), T.scale(worst, gamma_max))
    return T.add(loss, T.scale(T.mean(coverage), gamma_cov))


def batch_simplification(samples, weights):
    """Mean simplification loss over every sampled cloud of a batch."""
    values = [
        loss_simplification(out.raw, cloud, weights.gamma_max, weights.gamma_cov)
        for _, outputs in samples
        for out, cloud in outputs
    ]
    return _batch_mean(values)


def loss_projection(sampler, params=None):
    """temperature^2, computed as exp(2 * log_temperature)."""
    if isinstance(sampler, T.Tensor):
        log_t = sampler
    else:
        log_t = (params or sampler.params)["log_temperature"]
    return T.exp(T.scale(log_t, 2.0))


def loss_total(task, simp, proj, weights):
    """w_task * task + w_simp * simp + w_proj * proj.

    Raises:
        ContractViolation: If any weight is negative.
    """
    weights.validate()
    total = T.scale(task, weights.w_task)
    total = T.add(total, T.scale(simp, weights.w_simp))
    return T.add(total, T.scale(proj, weights.w_proj))


def sampler_objective(sampler, pool, batch, weights, params=None):
    """All sampler loss components for one batch.

    Returns:
        Dict of scalar tensors: task, simp, proj, total.
    """
    pool = _check_pool(pool)
    samples = sample_batch(sampler, pool[0].task_kind, batch, params)
    task = loss_sampler_task_joint(sampler, pool, batch, params=params, samples=samples)
    simp = batch_simplification(samples, weights)
    proj = loss_projection(sampler, params)
    return {"task": task, "simp": simp, "proj": proj, "total": loss_total(task, simp, proj, weights)}
