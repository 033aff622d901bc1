"""Task-model fitting, sampler training engines, meta-learning and evaluation.

Engines:
    single / joint   Adam on w_task * task + w_simp * simp + w_proj * proj,
                     the task term summed over a pool of frozen models.
    meta             per-model inner gradient steps, one outer SGD step on the
                     summed post-adaptation task losses, then a direct Adam
                     step on simplification + projection.
    adapt            joint training started from meta-sampler weights.
"""

import logging
import time
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from tqdm import tqdm

from metasampler import data
from metasampler import geometry
from metasampler import losses
from metasampler import models
from metasampler import optim
from metasampler import tensor as T
from metasampler.config import LossWeights
from metasampler.errors import ContractViolation, NumericalAbort
from metasampler.reports import MetricLog

logger = logging.getLogger(__name__)

PRIMARY_METRIC = {
    "classification": "accuracy",
    "reconstruction": "chamfer",
    "retrieval": "accuracy",
    "pose_regression": "rot_error_deg",
}
HIGHER_IS_BETTER = {"classification": True, "reconstruction": False, "retrieval": True, "pose_regression": False}

PRETRAIN_EVAL_SIZE = 64


def _names(params):
    return list(params.keys())


def _model_inputs(kind, example):
    if kind in models.PAIR_KINDS:
        return example["cloud"], example["other"]
    return example["cloud"]


def _batches(count, batch_size, rng):
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def _check_finite(values, diagnostics):
    if all(np.isfinite(v) for v in values.values()):
        return
    diagnostics = dict(diagnostics, components=values)
    logger.error("non-finite loss: %s", diagnostics)
    raise NumericalAbort(f"non-finite loss in {diagnostics.get('engine')} step", diagnostics)


# ── Task models ─────────────────────────────────────────────────────────────


def convergence_bars(dataset):
    """Pretraining bars per task kind, on the unsampled validation split.

    Reconstruction must reach a Chamfer distance below ten times the squared
    mean nearest-neighbor spacing of the data.
    """
    shapes = dataset.split("val") if len(dataset.split("val")) else dataset.split("train")
    spacing = data.mean_nn_spacing(shapes.clouds)
    return {
        "classification": 0.9,
        "retrieval": 1.0,
        "reconstruction": 10.0 * spacing * spacing,
        "pose_regression": 20.0,
    }


def fit_task_model_epoch(model, examples, optimizer, seed, batch_size=24):
    """One Adam epoch of a task model on unsampled inputs.

    Returns:
        Mean batch loss of the epoch.
    """
    names = _names(model.params)
    rng = np.random.default_rng(seed)
    total, steps = 0.0, 0
    for idx in _batches(len(examples), batch_size, rng):
        with T.Tape():
            batch = [examples[i] for i in idx]
            terms = [losses.task_loss(model, ex, _model_inputs(model.task_kind, ex)) for ex in batch]
            loss = losses._batch_mean(terms)
            value = loss.item()
            _check_finite({"task": value}, {"engine": "pretrain", "task": model.task_kind, "seed": model.seed})
            grads = T.grad(loss, [model.params[k] for k in names])
        optimizer.step({k: g.data for k, g in zip(names, grads)})
        total += value
        steps += 1
    return total / max(steps, 1)


def task_model_metric(model, dataset, split="val", seed=0, eval_size=PRETRAIN_EVAL_SIZE, n_ways=4):
    """Primary metric of a task model on unsampled clouds."""
    metrics = evaluate(None, [model], dataset, split=split, seed=seed, eval_size=eval_size, n_ways=n_ways)
    return metrics[PRIMARY_METRIC[model.task_kind]]


# ── Sampler training (single / joint) ───────────────────────────────────────


@dataclass
class TrainResult:
    sampler: object
    records: list


def _train_sampler(engine, sampler, pool, dataset, cfg, test_models, log, verbose, eval_split="test"):
    cfg.validate()
    kind = pool[0].task_kind
    fingerprints = {m.uid: m.fingerprint() for m in pool}
    sampler = models.clone_sampler(sampler, requires_grad=True)
    params = sampler.params
    names = _names(params)
    optimizer = optim.make_optimizer(cfg.optimizer_kind, params, cfg.lr)
    examples = data.make_examples(kind, dataset, "train", seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    log = log or MetricLog(engine=engine, task=kind, seed=cfg.seed)

    for epoch in tqdm(range(1, cfg.epochs + 1), desc=f"{engine} {kind}", disable=not verbose):
        started = time.perf_counter()
        sums = {"task": 0.0, "simp": 0.0, "proj": 0.0, "total": 0.0}
        steps = 0
        for batch_no, idx in enumerate(_batches(len(examples), cfg.batch_size, rng)):
            batch = [examples[i] for i in idx]
            with T.Tape():
                parts = losses.sampler_objective(sampler, pool, batch, cfg.loss_weights)
                values = {k: v.item() for k, v in parts.items()}
                _check_finite(values, {"engine": engine, "task": kind, "epoch": epoch, "batch": batch_no})
                grads = T.grad(parts["total"], [params[k] for k in names])
            optimizer.step({k: g.data for k, g in zip(names, grads)})
            for k, v in values.items():
                sums[k] += v
            steps += 1

        metrics = {"temperature": sampler.temperature}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            if test_models:
                metrics["test"] = evaluate(sampler, test_models, dataset, split=eval_split, seed=cfg.seed,
                                           eval_size=cfg.eval_size, n_ways=cfg.retrieval_ways,
                                           train_uids=[m.uid for m in pool])
            metrics["train"] = evaluate(sampler, pool, dataset, split=eval_split, seed=cfg.seed,
                                        eval_size=cfg.eval_size, n_ways=cfg.retrieval_ways)
        mean_losses = {k: v / max(steps, 1) for k, v in sums.items()}
        log.write(epoch, mean_losses, metrics, wall_ms=1000.0 * (time.perf_counter() - started), engine=engine)
        logger.debug("%s epoch %d losses %s", engine, epoch, mean_losses)

    for model in pool:
        if model.fingerprint() != fingerprints[model.uid]:
            raise ContractViolation(f"{model.uid}: frozen parameters changed during {engine} training")
    for value in params.values():
        value.requires_grad = False
    sampler.meta["train_uids"] = sorted(set(sampler.meta.get("train_uids", [])) | {m.uid for m in pool})
    return TrainResult(sampler=sampler, records=log.records)


def train_single(sampler, model, dataset, cfg, test_models=(), log=None, verbose=False):
    """Train a sampler against one frozen task model.

    Args:
        sampler: Initial SamplerModel (not modified).
        model: Frozen TaskModel.
        dataset: data.Dataset.
        cfg: TrainConfig.
        test_models: Held-out frozen models of the same task for evaluation.
        log: Optional MetricLog.
        verbose: Show a progress bar.

    Returns:
        TrainResult with the trained copy and its metric records.
    """
    models.require_frozen(model)
    models.assert_disjoint([model], test_models, "single-model training vs test pool")
    return _train_sampler("single", sampler, [model], dataset, cfg, list(test_models), log, verbose)


def train_joint(sampler, pool, dataset, cfg, log=None, verbose=False, engine="joint"):
    """Train a sampler against the train sub-pool; evaluate on the disjoint test sub-pool."""
    if not pool.train_models:
        raise ContractViolation("joint training needs at least one training model")
    for model in pool.train_models:
        models.require_frozen(model)
    return _train_sampler(engine, sampler, list(pool.train_models), dataset, cfg, list(pool.test_models), log,
                          verbose)


# ── Meta-learning ───────────────────────────────────────────────────────────


@dataclass
class MetaStepState:
    """Parameters of one meta-step.

    ``adapted`` maps ``(task_index, model_index)`` to the inner-updated
    parameters; ``theta`` is not touched until the outer update commits.
    """

    theta: dict
    adapted: dict = field(default_factory=dict)
    meta_gradient: dict = field(default_factory=dict)


def meta_inner_update(theta, loss_fn, alpha, steps, second_order=True):
    """Plain gradient steps from ``theta`` on one model's task loss.

    Args:
        theta: Dict name -> tensor (requires_grad).
        loss_fn: Callable mapping a params dict to a scalar tensor.
        alpha: Inner step size.
        steps: Number of steps; 0 returns ``theta`` itself.
        second_order: Keep the update differentiable with respect to theta.
            Otherwise the result is a set of fresh leaves.

    Returns:
        Dict name -> tensor of adapted parameters.
    """
    if steps < 0:
        raise ContractViolation(f"inner steps must be >= 0, got {steps}")
    names = _names(theta)
    params = dict(theta)
    for _ in range(steps):
        loss = loss_fn(params)
        grads = T.grad(loss, [params[k] for k in names], create_graph=second_order)
        params = {k: T.sub(params[k], T.scale(g, alpha)) for k, g in zip(names, grads)}
    if not second_order and steps:
        params = {k: T.Tensor(v.data, requires_grad=True) for k, v in params.items()}
    return params


def meta_outer_update(state, beta, loss_fns, second_order=True, scales=None):
    """One SGD step on the summed post-adaptation losses.

    Args:
        state: MetaStepState with ``adapted`` filled for every key of ``loss_fns``.
        beta: Outer step size.
        loss_fns: Dict key -> callable(params) -> scalar tensor.
        second_order: Differentiate through the inner updates; otherwise the
            gradient at the adapted parameters stands in for it.
        scales: Optional dict key -> multiplier of that key's loss.

    Returns:
        Tuple of (dict name -> updated numpy array, dict key -> loss value).

    Raises:
        ContractViolation: If an adapted entry is missing.
    """
    missing = [key for key in sorted(loss_fns) if key not in state.adapted]
    if missing:
        raise ContractViolation(f"meta_outer_update: no adapted parameters for {missing}")
    names = _names(state.theta)
    meta_grad = {k: np.zeros_like(state.theta[k].data) for k in names}
    values = {}
    for key in sorted(loss_fns):
        loss = loss_fns[key](state.adapted[key])
        values[key] = loss.item()
        if scales and key in scales:
            loss = T.scale(loss, scales[key])
        targets = state.theta if second_order else state.adapted[key]
        for name, g in zip(names, T.grad(loss, [targets[k] for k in names])):
            meta_grad[name] = meta_grad[name] + g.data
    state.meta_gradient = meta_grad
    updated = {k: state.theta[k].data - beta * meta_grad[k] for k in names}
    return updated, values


def _sampler_task_loss(sampler, model, batch, params):
    return losses.loss_sampler_task_single(sampler, model, batch, params=params)


@dataclass
class MetaResult:
    sampler: object
    records: list
    uids: list


def meta_train(sampler, cfg, pools, dataset, aux_weights=None, log=None, verbose=False):
    """Meta-train a sampler over several tasks.

    Each iteration samples one batch per (task, model) pair, used for both
    its inner and its outer loss. The direct simplification + projection
    step reuses the batch of the first model of the first task.

    Args:
        sampler: Initial SamplerModel (not modified).
        cfg: MetaConfig.
        pools: Dict task kind -> list of frozen TaskModels (one per model j).
        dataset: data.Dataset.
        aux_weights: LossWeights for the direct step (w_task is unused).
        log: Optional MetricLog.
        verbose: Show a progress bar.

    Returns:
        MetaResult with the meta-sampler, its records and the UIDs it saw.
    """
    cfg.validate()
    aux_weights = aux_weights or LossWeights()
    aux_weights.validate()
    for kind in cfg.tasks:
        if not pools.get(kind):
            raise ContractViolation(f"meta_train: no models for task {kind}")
        for model in pools[kind]:
            models.require_frozen(model)
            if model.task_kind != kind:
                raise ContractViolation(f"meta_train: {model.uid} listed under {kind}")
    uids = [m.uid for kind in cfg.tasks for m in pools[kind]]
    if len(set(uids)) != len(uids):
        raise ContractViolation("meta_train: a model appears twice across meta pools")

    sampler = models.clone_sampler(sampler, requires_grad=True)
    theta = sampler.params
    names = _names(theta)
    aux_opt = optim.Adam(theta, cfg.aux_lr)
    examples = {
        kind: data.make_examples(kind, dataset, "train", seed=data.derive_seed(cfg.seed, i))
        for i, kind in enumerate(cfg.tasks)
    }
    rng = np.random.default_rng(cfg.seed)
    running = {}
    log = log or MetricLog(engine="meta", task="+".join(cfg.tasks), seed=cfg.seed)

    for iteration in tqdm(range(1, cfg.iterations + 1), desc="Meta-training", disable=not verbose):
        started = time.perf_counter()
        batches = {}
        for i, kind in enumerate(cfg.tasks):
            for j in range(len(pools[kind])):
                idx = rng.choice(len(examples[kind]), size=min(cfg.batch_size, len(examples[kind])), replace=False)
                batches[(i, j)] = [examples[kind][e] for e in idx]

        with T.Tape():
            state = MetaStepState(theta=theta)
            loss_fns, scales = {}, {}
            for i, kind in enumerate(cfg.tasks):
                for j, model in enumerate(pools[kind]):
                    fn = partial(_sampler_task_loss, sampler, model, batches[(i, j)])
                    loss_fns[(i, j)] = fn
                    state.adapted[(i, j)] = meta_inner_update(theta, fn, cfg.alpha, cfg.inner_steps,
                                                              cfg.second_order)
                    if cfg.normalize_tasks and running.get(kind):
                        scales[(i, j)] = 1.0 / running[kind]
            updated, outer = meta_outer_update(state, cfg.beta, loss_fns, cfg.second_order, scales)
        per_task = {
            kind: float(sum(v for (i, _), v in outer.items() if i == idx))
            for idx, kind in enumerate(cfg.tasks)
        }
        _check_finite(per_task, {"engine": "meta", "epoch": iteration})
        for name in names:
            theta[name].data = updated[name]
        if cfg.normalize_tasks:
            for kind, value in per_task.items():
                count = len(pools[kind])
                previous = running.get(kind)
                mean = value / count
                running[kind] = mean if previous is None else previous + (mean - previous) / iteration

        with T.Tape():
            samples = losses.sample_batch(sampler, cfg.tasks[0], batches[(0, 0)])
            simp = losses.batch_simplification(samples, aux_weights)
            proj = losses.loss_projection(sampler)
            aux = T.add(T.scale(simp, aux_weights.w_simp), T.scale(proj, aux_weights.w_proj))
            aux_values = {"simp": simp.item(), "proj": proj.item()}
            _check_finite(aux_values, {"engine": "meta", "epoch": iteration, "task": "aux"})
            grads = T.grad(aux, [theta[k] for k in names])
        aux_opt.step({k: g.data for k, g in zip(names, grads)})

        task_total = float(sum(per_task.values()))
        log.write(
            iteration,
            {"task": task_total, "simp": aux_values["simp"], "proj": aux_values["proj"],
             "total": task_total + aux_weights.w_simp * aux_values["simp"] + aux_weights.w_proj * aux_values["proj"]},
            {"per_task": per_task, "temperature": sampler.temperature},
            wall_ms=1000.0 * (time.perf_counter() - started),
        )

    for value in theta.values():
        value.requires_grad = False
    sampler.meta.update({"meta_tasks": list(cfg.tasks), "meta_uids": uids, "train_uids": sorted(uids)})
    return MetaResult(sampler=sampler, records=log.records, uids=uids)


def adapt(meta_sampler, pool, dataset, cfg, meta_uids=(), log=None, verbose=False):
    """Fine-tune a (meta-)sampler on a task pool with joint training.

    Args:
        meta_sampler: Starting SamplerModel.
        pool: ModelPool for the target task, disjoint from ``meta_uids``.
        dataset: data.Dataset.
        cfg: TrainConfig; ``epochs=0`` returns a copy of the starting weights.
        meta_uids: UIDs of every model used in meta-training.

    Raises:
        PoolOverlapError: If the pool shares a model with meta-training.
    """
    models.assert_disjoint(pool.uids, meta_uids, "adaptation pool vs meta-training pools")
    if cfg.epochs == 0:
        return TrainResult(sampler=models.clone_sampler(meta_sampler), records=[])
    return train_joint(meta_sampler, pool, dataset, cfg, log=log, verbose=verbose, engine="adapt")


# ── Evaluation ──────────────────────────────────────────────────────────────


def _eval_items(kind, shapes, seed, eval_size, n_ways):
    if kind in ("classification", "reconstruction"):
        picked = shapes.sample(eval_size, seed)
        return [{"cloud": c, "label": int(y)} for c, y in zip(picked.clouds, picked.labels)]
    if kind == "retrieval":
        return [data.gen_retrieval_episode(shapes, n_ways, data.derive_seed(seed, e)) for e in range(eval_size)]
    return [data.gen_registration_pair(shapes, data.derive_seed(seed, e)) for e in range(eval_size)]


def _model_metrics(model, items, sample_fn):
    kind = model.task_kind
    if kind == "classification":
        hits, nll = [], []
        for e, item in enumerate(items):
            logits = models.task_forward(model, sample_fn(item["cloud"], e))
            hits.append(int(np.argmax(logits.data)) == item["label"])
            nll.append(losses.loss_classification(logits, item["label"]).item())
        return {"accuracy": float(np.mean(hits)), "loss": float(np.mean(nll))}
    if kind == "reconstruction":
        cds = [
            geometry.chamfer_value(models.task_forward(model, sample_fn(item["cloud"], e)), item["cloud"])
            for e, item in enumerate(items)
        ]
        return {"chamfer": float(np.mean(cds))}
    if kind == "retrieval":
        hits = []
        for e, episode in enumerate(items):
            query = sample_fn(episode.query, e)
            scores = [models.task_forward(model, (query, cand)).item() for cand in episode.candidates]
            hits.append(int(np.argmax(scores)) == episode.answer)
        return {"accuracy": float(np.mean(hits))}
    rot, trans, cds = [], [], []
    for e, pair in enumerate(items):
        euler, t = models.task_forward(model, (sample_fn(pair.source, e), sample_fn(pair.template, e)))
        rot.append(geometry.rotation_error_deg(geometry.rigid_matrix(pair.euler), geometry.rigid_matrix(euler.data)))
        trans.append(float(np.linalg.norm(t.data - pair.t)))
        cds.append(geometry.chamfer_value(geometry.apply_rigid(pair.source, euler.data, t.data), pair.template))
    return {
        "rot_error_deg": float(np.mean(rot)),
        "rot_error_std": float(np.std(rot)),
        "trans_error": float(np.mean(trans)),
        "chamfer": float(np.mean(cds)),
    }


def _evaluate_inputs(sample_fn, task_models, dataset, split, seed, eval_size, n_ways, train_uids):
    task_models = list(task_models)
    if not task_models:
        raise ContractViolation("evaluate: no models")
    kinds = {m.task_kind for m in task_models}
    if len(kinds) != 1:
        raise ContractViolation(f"evaluate: mixed task kinds {sorted(kinds)}")
    models.assert_disjoint(task_models, train_uids, "evaluation pool vs training pool")
    kind = kinds.pop()
    items = _eval_items(kind, dataset.split(split), seed, eval_size, n_ways)
    with T.no_grad():
        per_model = [_model_metrics(model, items, sample_fn) for model in task_models]
    result = {name: float(np.mean([pm[name] for pm in per_model])) for name in per_model[0]}
    result["models"] = len(per_model)
    return result


def evaluate_indices(index_fn, task_models, dataset, split="test", seed=0, eval_size=160, n_ways=4,
                     train_uids=()):
    """Metrics of frozen models on clouds reduced by an index sampler.

    Args:
        index_fn: Callable ``(cloud, item_seed) -> indices``, or None for the
            unsampled clouds.
        task_models: Frozen models of one task kind.
        dataset: data.Dataset.
        split: Split to evaluate on.
        seed: Seed of the evaluation items.
        eval_size: Examples, episodes or pairs per model.
        n_ways: Candidates per retrieval episode.
        train_uids: UIDs the evaluated models must not share.

    Returns:
        Dict of metrics averaged over models, plus ``models``.
    """
    if index_fn is None:
        sample_fn = lambda cloud, e: cloud  # noqa: E731
    else:
        def sample_fn(cloud, e):
            return cloud[list(index_fn(cloud, data.derive_seed(seed, 1_000_003 + e)))]
    return _evaluate_inputs(sample_fn, task_models, dataset, split, seed, eval_size, n_ways, train_uids)


def evaluate(sampler, task_models, dataset, mode="matched", split="test", seed=0, eval_size=160, n_ways=4,
             train_uids=()):
    """Metrics of frozen models on sampler output.

    ``mode="matched"`` feeds the hard indices of ``sampler_match``;
    ``mode="soft"`` feeds the soft-projected points. ``sampler=None`` is the
    identity sampler (ratio 1).
    """
    if sampler is None:
        return evaluate_indices(None, task_models, dataset, split, seed, eval_size, n_ways, train_uids)
    if mode == "matched":
        return evaluate_indices(lambda cloud, s: models.sampler_match(sampler, cloud), task_models, dataset,
                                split, seed, eval_size, n_ways, train_uids)
    if mode != "soft":
        raise ContractViolation(f"unknown evaluation mode {mode!r}")

    def sample_fn(cloud, e):
        return models.sampler_forward(sampler, cloud).soft.data

    return _evaluate_inputs(sample_fn, task_models, dataset, split, seed, eval_size, n_ways, train_uids)


def baseline_index_fn(name, n, k=4):
    """Index sampler for a classical baseline: ``fps``, ``rs`` or ``idis``."""
    if name == "fps":
        return lambda cloud, s: geometry.farthest_point_sample(cloud, n)
    if name == "rs":
        return lambda cloud, s: geometry.random_sample(cloud, n, s)
    if name == "idis":
        return lambda cloud, s: geometry.inverse_density_sample(cloud, n, k)
    raise ContractViolation(f"unknown baseline sampler {name!r}")


def is_better(kind, candidate, reference):
    """Whether ``candidate`` is at least as good as ``reference`` on the primary metric."""
    if HIGHER_IS_BETTER[kind]:
        return candidate >= reference
    return candidate <= reference
