"""CLI entry point for metasampler.

Every artifact lives under the ``--out`` root:

    data/ data-shift/          datasets (PCB1 files + index.json)
    pools/<name>/              frozen task-model pools
    samplers/<name>/r<R>-s<S>/ sampler checkpoints, metric logs, configs
    eval/ export/              evaluation results and overlays
"""

import json
import logging
import multiprocessing
import os

import click

from metasampler import data, geometry, models, reports, training
from metasampler.config import (
    ARCHES, META_TASKS_DEFAULT, TASK_KINDS, DatasetSpec, ExperimentConfig, MetaConfig,
    SampleSpec, TrainConfig, max_workers,
)
from metasampler.errors import InputError, MetaSamplerError, NumericalAbort, PoolOverlapError, exit_code_for

logger = logging.getLogger(__name__)

BASELINES = ("fps", "rs", "idis")


class MetaSamplerGroup(click.Group):
    """Click group that maps package errors to the documented exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (MetaSamplerError, OSError) as exc:
            click.echo(f"Error: {exc}", err=True)
            if isinstance(exc, NumericalAbort) and exc.diagnostics:
                click.echo(json.dumps(exc.diagnostics, sort_keys=True, default=str), err=True)
            ctx.exit(exit_code_for(exc))


@click.group(cls=MetaSamplerGroup)
@click.option("--out", default="runs", help="Root directory for every artifact.")
@click.option("--verbose", is_flag=True, help="Log progress and show progress bars.")
@click.pass_context
def main(ctx, out, verbose):
    """Learnable point-cloud sampling with meta-learning."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    ctx.obj = {"root": out, "verbose": verbose}


# ── Helpers ─────────────────────────────────────────────────────────────────


def _data_dir(root, shift):
    return os.path.join(root, "data-shift" if shift else "data")


def _load_dataset(root, shift):
    path = _data_dir(root, shift)
    if not os.path.exists(os.path.join(path, "index.json")):
        raise InputError(f"no dataset at {path}; run gen-data{' --shift' if shift else ''} first")
    return data.load_dataset(path)


def _pool_dir(root, name):
    return os.path.join(root, "pools", name)


def _load_pool(root, name):
    path = _pool_dir(root, name)
    if not os.path.exists(os.path.join(path, "pool.json")):
        raise InputError(f"no pool at {path}; run pretrain first")
    return models.load_pool(path)


def _run_dir(root, name, ratio, seed):
    return os.path.join(root, "samplers", name, f"r{ratio}-s{seed}")


def _load_sampler(root, name, ratio, seed):
    path = os.path.join(_run_dir(root, name, ratio, seed), "sampler.ckpt")
    if not os.path.exists(path):
        raise InputError(f"no sampler checkpoint at {path}")
    return models.load_checkpoint(path)


def _split_list(value):
    return [v.strip() for v in value.split(",") if v.strip()]


def _run_jobs(fn, jobs_args, jobs):
    """Run independent experiments, in worker processes when ``jobs`` > 1."""
    workers = min(max_workers(jobs), len(jobs_args))
    if workers <= 1:
        return [fn(args) for args in jobs_args]
    with multiprocessing.get_context("spawn").Pool(workers) as pool:
        return pool.map(fn, jobs_args)


def _fmt(value):
    return f"{value:.4f}" if isinstance(value, float) else value


def _baseline_metrics(pool, dataset, sample, cfg):
    metric = training.PRIMARY_METRIC[pool.task_kind]
    row = {}
    for name in BASELINES:
        result = training.evaluate_indices(
            training.baseline_index_fn(name, sample.n), pool.test_models, dataset, seed=cfg.seed,
            eval_size=cfg.eval_size, n_ways=cfg.retrieval_ways,
        )
        row[name] = result[metric]
    return row


# ── Job bodies (module level so worker processes can import them) ─────────


def _train_sampler_job(job):
    config = ExperimentConfig.from_json(job["config"])
    dataset = data.load_dataset(job["data_dir"])
    pool = models.load_pool(job["pool_dir"])
    out = job["out_dir"]
    os.makedirs(out, exist_ok=True)
    config.save(out)
    log = reports.MetricLog(os.path.join(out, "log.jsonl"), engine=job["mode"], task=pool.task_kind,
                            seed=config.train.seed, config_hash=config.config_hash())
    sampler = models.init_sampler(config.sample.n, config.sample.m, seed=config.train.seed)
    if job["mode"] == "single":
        model = pool.train_models[job["model_index"]]
        result = training.train_single(sampler, model, dataset, config.train, test_models=pool.test_models,
                                       log=log, verbose=job["verbose"])
    else:
        sub = models.ModelPool(pool.task_kind, pool.train_models[:job["k"]], pool.test_models)
        result = training.train_joint(sampler, sub, dataset, config.train, log=log, verbose=job["verbose"])
    models.save_checkpoint(result.sampler, os.path.join(out, "sampler.ckpt"))
    return result.records[-1]["metrics"] if result.records else {}


def _meta_train_job(job):
    config = ExperimentConfig.from_json(job["config"])
    dataset = data.load_dataset(job["data_dir"])
    pools = {}
    for kind, pool_dir in job["pool_dirs"].items():
        pools[kind] = models.load_pool(pool_dir).train_models[:job["k"]]
    out = job["out_dir"]
    os.makedirs(out, exist_ok=True)
    config.save(out)
    log = reports.MetricLog(os.path.join(out, "log.jsonl"), engine="meta", task="+".join(config.meta.tasks),
                            seed=config.meta.seed, config_hash=config.config_hash())
    sampler = models.init_sampler(config.sample.n, config.sample.m, seed=config.meta.seed)
    result = training.meta_train(sampler, config.meta, pools, dataset, aux_weights=config.train.loss_weights,
                                 log=log, verbose=job["verbose"])
    models.save_checkpoint(result.sampler, os.path.join(out, "sampler.ckpt"))
    last = result.records[-1] if result.records else {"losses": {}, "metrics": {}}
    return {"losses": last["losses"], "temperature": result.sampler.temperature}


def _adapt_job(job):
    config = ExperimentConfig.from_json(job["config"])
    dataset = data.load_dataset(job["data_dir"])
    pool = models.load_pool(job["pool_dir"])
    if job["meta_ckpt"]:
        start = models.load_checkpoint(job["meta_ckpt"])
        meta_uids = start.meta.get("meta_uids", [])
    else:
        start = models.init_sampler(config.sample.n, config.sample.m,
                                    seed=data.derive_seed(config.train.seed, config.sample.n))
        meta_uids = []
    out = job["out_dir"]
    os.makedirs(out, exist_ok=True)
    config.save(out)
    log = reports.MetricLog(os.path.join(out, "log.jsonl"), engine="adapt", task=pool.task_kind,
                            seed=config.train.seed, config_hash=config.config_hash())
    result = training.adapt(start, pool, dataset, config.train, meta_uids=meta_uids, log=log,
                            verbose=job["verbose"])
    models.save_checkpoint(result.sampler, os.path.join(out, "sampler.ckpt"))
    return result.records


# ── Commands ────────────────────────────────────────────────────────────────


@main.command("gen-data")
@click.option("--seed", default=0, type=int, help="Dataset seed.")
@click.option("--m", "m", default=64, type=int, help="Points per cloud.")
@click.option("--train-per-class", default=120, type=int, help="Training clouds per class.")
@click.option("--val-per-class", default=40, type=int, help="Validation clouds per class.")
@click.option("--test-per-class", default=40, type=int, help="Test clouds per class.")
@click.option("--jitter", default=0.01, type=float, help="Gaussian jitter sigma.")
@click.option("--shift", is_flag=True, help="Generate the shifted distribution (writes data-shift/).")
@click.pass_context
def gen_data(ctx, seed, m, train_per_class, val_per_class, test_per_class, jitter, shift):
    """Generate the synthetic shape dataset."""
    root = ctx.obj["root"]
    spec = DatasetSpec(m=m, train_per_class=train_per_class, val_per_class=val_per_class,
                       test_per_class=test_per_class, jitter=jitter, seed=seed, distribution_shift=shift)
    dataset = data.gen_dataset(spec, verbose=ctx.obj["verbose"])
    out = _data_dir(root, shift)
    data.save_dataset(dataset, out)
    ExperimentConfig(command="gen-data", dataset=spec, sample=SampleSpec(m=m, n=m)).save(out)

    click.echo(f"Dataset written to {out} (spec {spec.spec_hash()})")
    for name in data.SPLITS:
        click.echo(f"  {name}: {len(dataset.splits[name])} clouds")


@main.command()
@click.option("--task", required=True, type=click.Choice(TASK_KINDS), help="Task kind.")
@click.option("--count", default=6, type=int, help="Models to pretrain.")
@click.option("--n-train", default=None, type=int, help="Models in the train sub-pool (rest go to test).")
@click.option("--seed", default=0, type=int, help="First model seed; models use seed, seed+1, ...")
@click.option("--arch", default="mini", type=click.Choice(ARCHES), help="Task network architecture.")
@click.option("--shift", is_flag=True, help="Pretrain on the shifted dataset.")
@click.option("--max-epochs", default=60, type=int, help="Epoch cap before declaring failure.")
@click.option("--loss", "classification_loss", default="ce", type=click.Choice(models.CLASSIFICATION_LOSSES),
              help="Classification loss: softmax cross-entropy or one-vs-rest BCE.")
@click.option("--name", default=None, help="Pool name (default: TASK-ARCH[-shift]).")
@click.pass_context
def pretrain(ctx, task, count, n_train, seed, arch, shift, max_epochs, classification_loss, name):
    """Pretrain and freeze a pool of task models."""
    root = ctx.obj["root"]
    dataset = _load_dataset(root, shift)
    name = name or f"{task}-{arch}{'-shift' if shift else ''}"
    pool = models.pretrain_task_models(task, count, range(seed, seed + count), dataset, n_train=n_train,
                                       arch=arch, max_epochs=max_epochs, classification_loss=classification_loss,
                                       verbose=ctx.obj["verbose"])
    out = _pool_dir(root, name)
    models.save_pool(pool, out)
    ExperimentConfig(command="pretrain", dataset=dataset.spec,
                     extra={"task": task, "count": count, "seed": seed, "arch": arch, "name": name,
                            "loss": classification_loss}).save(out)

    rows = [[m.uid, split, m.meta.get("epochs"), _fmt(m.meta.get("val_metric"))]
            for split, group in (("train", pool.train_models), ("test", pool.test_models)) for m in group]
    click.echo(reports.format_table(rows, ["Model", "Sub-pool", "Epochs", training.PRIMARY_METRIC[task]]))
    click.echo(f"\nPool written to {out}")


@main.command("train-sampler")
@click.option("--task", required=True, type=click.Choice(TASK_KINDS), help="Task kind.")
@click.option("--mode", default="joint", type=click.Choice(["single", "joint"]), help="Training engine.")
@click.option("--k", "k", default=3, type=int, help="Models in the joint loss.")
@click.option("--model-index", default=0, type=int, help="Train-pool model used by --mode single.")
@click.option("--ratio", multiple=True, type=int, default=(8,), help="Sampling ratio m/n (repeatable).")
@click.option("--seed", multiple=True, type=int, default=(0,), help="Run seed (repeatable).")
@click.option("--epochs", default=10, type=int, help="Training epochs.")
@click.option("--lr", default=1e-3, type=float, help="Adam learning rate.")
@click.option("--batch-size", default=24, type=int, help="Examples per step.")
@click.option("--pool", "pool_name", default=None, help="Pool name (default: TASK-mini).")
@click.option("--name", default=None, help="Run name (default: MODE-TASK[-kK]).")
@click.option("--jobs", default=1, type=int, help="Parallel runs (capped by METASAMPLER_THREADS).")
@click.pass_context
def train_sampler(ctx, task, mode, k, model_index, ratio, seed, epochs, lr, batch_size, pool_name, name, jobs):
    """Train samplers with the single-model or joint engine."""
    root = ctx.obj["root"]
    dataset = _load_dataset(root, False)
    pool_name = pool_name or f"{task}-mini"
    pool = _load_pool(root, pool_name)
    if k < 1 or k > len(pool.train_models):
        raise InputError(f"--k {k} exceeds the {len(pool.train_models)} training models of {pool_name}")
    name = name or (f"single-{task}" if mode == "single" else f"joint-{task}-k{k}")

    jobs_args = []
    for r in ratio:
        for s in seed:
            train_cfg = TrainConfig(batch_size=batch_size, lr=lr, epochs=epochs, seed=s)
            config = ExperimentConfig(command="train-sampler", train=train_cfg, dataset=dataset.spec,
                                      sample=SampleSpec.from_ratio(dataset.spec.m, r).validate(),
                                      extra={"task": task, "mode": mode, "k": k, "pool": pool_name})
            jobs_args.append({
                "config": config.to_json(), "mode": mode, "k": k, "model_index": model_index,
                "data_dir": _data_dir(root, False), "pool_dir": _pool_dir(root, pool_name),
                "out_dir": _run_dir(root, name, r, s), "verbose": ctx.obj["verbose"],
            })
    results = _run_jobs(_train_sampler_job, jobs_args, jobs)

    metric = training.PRIMARY_METRIC[task]
    rows = []
    for job, final in zip(jobs_args, results):
        config = ExperimentConfig.from_json(job["config"])
        base = _baseline_metrics(pool, dataset, config.sample, config.train)
        rows.append([int(config.sample.ratio), config.train.seed,
                     _fmt(final.get("test", {}).get(metric)), _fmt(final.get("train", {}).get(metric)),
                     *(_fmt(base[b]) for b in BASELINES)])
    headers = ["Ratio", "Seed", f"Learned (test) {metric}", f"Learned (train) {metric}", "FPS", "RS", "IDIS"]
    click.echo(reports.format_table(rows, headers))
    path = reports.write_summary(f"{mode} sampler training: {task}", [("Results", headers, rows)],
                                 os.path.join(root, "samplers", name))
    click.echo(f"\nSummary written to {path}")


@main.command("meta-train")
@click.option("--tasks", default=",".join(META_TASKS_DEFAULT), help="Comma-separated meta-training tasks.")
@click.option("--k", "k", default=3, type=int, help="Models per task.")
@click.option("--ratio", multiple=True, type=int, default=(8,), help="Sampling ratio m/n (repeatable).")
@click.option("--seed", multiple=True, type=int, default=(0,), help="Run seed (repeatable).")
@click.option("--iterations", default=40, type=int, help="Meta-iterations.")
@click.option("--inner-steps", default=5, type=int, help="Inner gradient steps per model.")
@click.option("--alpha", default=1e-3, type=float, help="Inner step size.")
@click.option("--beta", default=1e-3, type=float, help="Outer step size.")
@click.option("--aux-lr", default=1e-3, type=float, help="Adam step size of the direct simplification/projection update.")
@click.option("--batch-size", default=24, type=int, help="Examples per task batch.")
@click.option("--second-order/--first-order", default=True, help="Exact or first-order meta-gradient.")
@click.option("--normalize-tasks", is_flag=True, help="Divide each task's outer loss by its running mean.")
@click.option("--name", default="meta", help="Run name.")
@click.option("--jobs", default=1, type=int, help="Parallel runs (capped by METASAMPLER_THREADS).")
@click.pass_context
def meta_train(ctx, tasks, k, ratio, seed, iterations, inner_steps, alpha, beta, aux_lr, batch_size,
               second_order, normalize_tasks, name, jobs):
    """Meta-train a sampler over several tasks."""
    root = ctx.obj["root"]
    dataset = _load_dataset(root, False)
    task_list = tuple(_split_list(tasks))
    pool_dirs = {}
    for kind in task_list:
        if kind not in TASK_KINDS:
            raise InputError(f"unknown task {kind!r}")
        pool = _load_pool(root, f"{kind}-mini")
        if k > len(pool.train_models):
            raise InputError(f"--k {k} exceeds the {len(pool.train_models)} training models of {kind}-mini")
        pool_dirs[kind] = _pool_dir(root, f"{kind}-mini")

    jobs_args = []
    for r in ratio:
        for s in seed:
            meta_cfg = MetaConfig(alpha=alpha, beta=beta, inner_steps=inner_steps, iterations=iterations,
                                  batch_size=batch_size, tasks=task_list, second_order=second_order,
                                  aux_lr=aux_lr, normalize_tasks=normalize_tasks, seed=s).validate()
            config = ExperimentConfig(command="meta-train", meta=meta_cfg, dataset=dataset.spec,
                                      sample=SampleSpec.from_ratio(dataset.spec.m, r).validate(), extra={"k": k})
            jobs_args.append({
                "config": config.to_json(), "k": k, "data_dir": _data_dir(root, False), "pool_dirs": pool_dirs,
                "out_dir": _run_dir(root, name, r, s), "verbose": ctx.obj["verbose"],
            })
    results = _run_jobs(_meta_train_job, jobs_args, jobs)

    rows = []
    for job, result in zip(jobs_args, results):
        config = ExperimentConfig.from_json(job["config"])
        losses = result["losses"]
        rows.append([int(config.sample.ratio), config.meta.seed, _fmt(losses.get("task")), _fmt(losses.get("simp")),
                     _fmt(result["temperature"])])
    headers = ["Ratio", "Seed", "Outer task loss", "Simplification", "Temperature"]
    click.echo(reports.format_table(rows, headers))
    path = reports.write_summary(f"Meta-training: {', '.join(task_list)}", [("Final iteration", headers, rows)],
                                 os.path.join(root, "samplers", name))
    click.echo(f"\nSummary written to {path}")


@main.command()
@click.option("--task", required=True, type=click.Choice(TASK_KINDS), help="Task to adapt to.")
@click.option("--init", "init", default="meta", type=click.Choice(["meta", "scratch"]), help="Starting weights.")
@click.option("--meta", "meta_name", default="meta", help="Meta-training run name.")
@click.option("--pool", "pool_name", default=None, help="Adaptation pool (default: TASK-ARCH[-shift]).")
@click.option("--arch", default="mini", type=click.Choice(ARCHES), help="Architecture of the adaptation pool.")
@click.option("--shift", is_flag=True, help="Adapt on the shifted dataset.")
@click.option("--ratio", multiple=True, type=int, default=(8,), help="Sampling ratio m/n (repeatable).")
@click.option("--seed", multiple=True, type=int, default=(0,), help="Run seed (repeatable).")
@click.option("--epochs", default=10, type=int, help="Adaptation epochs.")
@click.option("--lr", default=1e-3, type=float, help="Adam learning rate.")
@click.option("--name", default=None, help="Run name (default: adapt-TASK-INIT[-ARCH][-shift]).")
@click.option("--jobs", default=1, type=int, help="Parallel runs (capped by METASAMPLER_THREADS).")
@click.pass_context
def adapt(ctx, task, init, meta_name, pool_name, arch, shift, ratio, seed, epochs, lr, name, jobs):
    """Adapt a meta-sampler (or a fresh sampler) to a task pool."""
    root = ctx.obj["root"]
    dataset = _load_dataset(root, shift)
    pool_name = pool_name or f"{task}-{arch}{'-shift' if shift else ''}"
    pool = _load_pool(root, pool_name)
    suffix = (f"-{arch}" if arch != "mini" else "") + ("-shift" if shift else "")
    name = name or f"adapt-{task}-{init}{suffix}"

    jobs_args = []
    for r in ratio:
        for s in seed:
            meta_ckpt = None
            if init == "meta":
                meta_ckpt = os.path.join(_run_dir(root, meta_name, r, s), "sampler.ckpt")
                if not os.path.exists(meta_ckpt):
                    raise InputError(f"no meta-sampler at {meta_ckpt}; run meta-train first")
                shared = pool.uids & set(models.load_checkpoint(meta_ckpt).meta.get("meta_uids", []))
                if shared:
                    raise PoolOverlapError(
                        f"pool {pool_name} overlaps meta-training models {sorted(shared)}; pretrain a separate "
                        f"pool (pretrain --task {task} --seed 100 --name {task}-adapt) and pass --pool {task}-adapt",
                        shared,
                    )
            config = ExperimentConfig(command="adapt", train=TrainConfig(lr=lr, epochs=epochs, seed=s),
                                      dataset=dataset.spec, sample=SampleSpec.from_ratio(dataset.spec.m, r).validate(),
                                      extra={"task": task, "init": init, "pool": pool_name, "meta": meta_name})
            jobs_args.append({
                "config": config.to_json(), "meta_ckpt": meta_ckpt, "data_dir": _data_dir(root, shift),
                "pool_dir": _pool_dir(root, pool_name), "out_dir": _run_dir(root, name, r, s),
                "verbose": ctx.obj["verbose"],
            })
    results = _run_jobs(_adapt_job, jobs_args, jobs)

    metric = training.PRIMARY_METRIC[task]
    rows = []
    for job, records in zip(jobs_args, results):
        config = ExperimentConfig.from_json(job["config"])
        series = reports.metric_series(records, metric)
        first = series[0][1] if series else None
        last = series[-1][1] if series else None
        rows.append([int(config.sample.ratio), config.train.seed, init, _fmt(first), _fmt(last),
                     _fmt(reports.loss_std(records, 2, 10))])
    headers = ["Ratio", "Seed", "Init", f"Epoch-1 {metric}", f"Final {metric}", "Loss std (epochs 2-10)"]
    click.echo(reports.format_table(rows, headers))
    path = reports.write_summary(f"Adaptation: {task} ({init} init)", [("Results", headers, rows)],
                                 os.path.join(root, "samplers", name))
    click.echo(f"\nSummary written to {path}")


@main.command("eval")
@click.option("--task", required=True, type=click.Choice(TASK_KINDS), help="Task kind.")
@click.option("--sampler", "sampler_name", required=True, help="Run name under samplers/, or fps, rs, idis.")
@click.option("--pool", "pool_name", default=None, help="Pool whose test models are evaluated (default: TASK-mini).")
@click.option("--ratio", multiple=True, type=int, default=(8,), help="Sampling ratio m/n (repeatable; 1 = unsampled).")
@click.option("--seed", default=0, type=int, help="Run seed of the learned sampler and the evaluation items.")
@click.option("--mode", default="matched", type=click.Choice(["matched", "soft"]), help="Hard indices or soft points.")
@click.option("--ways", default=4, type=int, help="Candidates per retrieval episode.")
@click.option("--eval-size", default=160, type=int, help="Examples, episodes or pairs per model.")
@click.option("--shift", is_flag=True, help="Evaluate on the shifted dataset.")
@click.pass_context
def evaluate(ctx, task, sampler_name, pool_name, ratio, seed, mode, ways, eval_size, shift):
    """Evaluate a sampler on held-out task models."""
    root = ctx.obj["root"]
    dataset = _load_dataset(root, shift)
    pool_name = pool_name or f"{task}-mini{'-shift' if shift else ''}"
    pool = _load_pool(root, pool_name)

    results = []
    for r in ratio:
        sample = SampleSpec.from_ratio(dataset.spec.m, r).validate(allow_identity=True)
        kwargs = {"seed": seed, "eval_size": eval_size, "n_ways": ways}
        if r == 1:
            metrics = training.evaluate_indices(None, pool.test_models, dataset, **kwargs)
        elif sampler_name in BASELINES:
            metrics = training.evaluate_indices(training.baseline_index_fn(sampler_name, sample.n),
                                                pool.test_models, dataset, **kwargs)
        else:
            sampler = _load_sampler(root, sampler_name, r, seed)
            metrics = training.evaluate(sampler, pool.test_models, dataset, mode=mode,
                                        train_uids=sampler.meta.get("train_uids", []), **kwargs)
        results.append({"ratio": r, "n": sample.n, "metrics": metrics})

    names = [k for k in results[0]["metrics"] if k != "models"]
    rows = [[res["ratio"], res["n"], *(_fmt(res["metrics"][k]) for k in names)] for res in results]
    click.echo(reports.format_table(rows, ["Ratio", "n", *names]))

    out = os.path.join(root, "eval", f"{task}-{sampler_name}-{mode}{'-shift' if shift else ''}-s{seed}")
    os.makedirs(out, exist_ok=True)
    config = ExperimentConfig(command="eval", dataset=dataset.spec,
                              extra={"task": task, "sampler": sampler_name, "pool": pool_name, "mode": mode,
                                     "ratios": list(ratio), "seed": seed, "ways": ways, "eval_size": eval_size})
    config.save(out)
    with open(os.path.join(out, "results.json"), "w", encoding="utf-8") as f:
        json.dump({"config_hash": config.config_hash(), "results": results}, f, indent=2, sort_keys=True)
    reports.write_summary(f"Evaluation: {sampler_name} on {task}", [("Results", ["Ratio", "n", *names], rows)],
                          out, config)
    click.echo(f"\nResults written to {out}")


@main.command()
@click.option("--sampler", "samplers", multiple=True, required=True,
              help="LABEL=RUN pair; LABEL is a task kind (colored) or any name (repeatable).")
@click.option("--ratio", default=8, type=int, help="Sampling ratio of the runs.")
@click.option("--seed", default=0, type=int, help="Run seed.")
@click.option("--shapes", default=4, type=int, help="Test shapes to export.")
@click.option("--compare", default=None, help="Two LABELs whose sampled sets are compared (LABEL_A,LABEL_B).")
@click.pass_context
def export(ctx, samplers, ratio, seed, shapes, compare):
    """Export sampled subsets as PCB1 files and SVG overlays."""
    root = ctx.obj["root"]
    dataset = _load_dataset(root, False)
    loaded = {}
    for entry in samplers:
        label, sep, run = entry.partition("=")
        if not sep:
            raise InputError(f"--sampler expects LABEL=RUN, got {entry!r}")
        loaded[label] = _load_sampler(root, run, ratio, seed)

    test = dataset.split("test")
    out = os.path.join(root, "export", f"r{ratio}-s{seed}")
    picked = test.sample(shapes, seed)
    for i, cloud in enumerate(picked.clouds):
        subsets = {label: models.sampler_match(s, cloud) for label, s in loaded.items()}
        reports.export_overlays(cloud, subsets, out, f"shape-{i:05d}")
    ExperimentConfig(command="export", dataset=dataset.spec, sample=SampleSpec.from_ratio(dataset.spec.m, ratio),
                     extra={"samplers": list(samplers), "seed": seed, "shapes": shapes, "compare": compare}).save(out)
    click.echo(f"Exported {len(picked)} shapes to {out}")

    if compare:
        labels = _split_list(compare)
        if len(labels) != 2 or any(label not in loaded for label in labels):
            raise InputError(f"--compare needs two loaded labels, got {compare!r}")
        a, b = loaded[labels[0]], loaded[labels[1]]
        overlaps = [reports.sample_overlap(models.sampler_match(a, c), models.sampler_match(b, c), a.n)
                    for c in test.clouds]
        below = sum(1 for v in overlaps if v < 1.0) / len(overlaps)
        with open(os.path.join(out, "overlap.json"), "w", encoding="utf-8") as f:
            json.dump({"pair": labels, "overlaps": overlaps, "mean": sum(overlaps) / len(overlaps),
                       "fraction_below_one": below}, f, indent=2)
        click.echo(f"Overlap {labels[0]} vs {labels[1]}: mean {sum(overlaps) / len(overlaps):.3f}, "
                   f"{below:.0%} of test shapes below 1.0")


@main.command()
@click.pass_context
def status(ctx):
    """Show datasets, pools and sampler runs under the output root."""
    root = ctx.obj["root"]
    for shift in (False, True):
        path = os.path.join(_data_dir(root, shift), "index.json")
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                index = json.load(f)
            click.echo(f"Dataset {os.path.basename(_data_dir(root, shift))}: {len(index['items'])} clouds "
                       f"(spec {index['spec_hash']})")
        else:
            click.echo(f"Dataset {os.path.basename(_data_dir(root, shift))}: missing")

    pools_root = os.path.join(root, "pools")
    pool_names = sorted(os.listdir(pools_root)) if os.path.isdir(pools_root) else []
    click.echo(f"Pools: {', '.join(pool_names) or 'none'}")

    runs_root = os.path.join(root, "samplers")
    run_names = sorted(os.listdir(runs_root)) if os.path.isdir(runs_root) else []
    for run in run_names:
        variants = sorted(d for d in os.listdir(os.path.join(runs_root, run)) if d.startswith("r"))
        click.echo(f"Sampler run {run}: {', '.join(variants) or 'no checkpoints'}")
    if not run_names:
        click.echo("Sampler runs: none")


@main.command("convert")
@click.argument("source")
@click.argument("target")
def convert(source, target):
    """Convert a point cloud between XYZ text and PCB1."""
    if not os.path.exists(source):
        raise InputError(f"no such file: {source}")
    cloud = geometry.read_pcb(source) if source.endswith(".pcb") else geometry.read_xyz(source)
    if target.endswith(".pcb"):
        geometry.write_pcb(target, cloud)
    else:
        geometry.write_xyz(target, cloud)
    click.echo(f"Wrote {len(cloud)} points to {target}")
