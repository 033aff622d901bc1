"""Mini task networks, the learnable sampler and model checkpoints.

Every network keeps its weights in an ordered ``params`` dict of tensors.
Forward functions accept an optional ``params`` override with the same keys,
which is how meta-learning evaluates adapted weights without touching the
model.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from metasampler import geometry
from metasampler import optim
from metasampler import tensor as T
from metasampler.errors import ContractViolation, FormatError, PoolOverlapError, PretrainingFailure

logger = logging.getLogger(__name__)

FEATURE_DIM = 64
NUM_CLASSES = 8

# Per-point widths and head widths per architecture
_ENCODER_WIDTHS = {"mini": (3, 32, 64), "wide": (3, 48, 64, 64)}
_HEAD_HIDDEN = {"mini": 32, "wide": 48}
PAIR_KINDS = ("retrieval", "pose_regression")
POSE_ANGLE_SCALE = 45.0
CLASSIFICATION_LOSSES = ("ce", "bce")


def _init_layer(rng, fan_in, fan_out, prefix):
    bound = np.sqrt(6.0 / fan_in)
    return {
        f"{prefix}w": T.Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))),
        f"{prefix}b": T.Tensor(np.zeros((1, fan_out))),
    }


def _init_mlp(rng, widths, prefix):
    params = {}
    for i in range(len(widths) - 1):
        params.update(_init_layer(rng, widths[i], widths[i + 1], f"{prefix}{i}."))
    return params


def linear(x, w, b):
    """x @ w + b with the bias row expanded explicitly."""
    bias = T.matmul(T.ones((x.shape[0], 1)), b)
    return T.add(T.matmul(x, w), bias)


def _mlp(x, params, prefix, layers, final_relu):
    h = x
    for i in range(layers):
        h = linear(h, params[f"{prefix}{i}.w"], params[f"{prefix}{i}.b"])
        if i < layers - 1 or final_relu:
            h = T.relu(h)
    return h


@dataclass
class Encoder:
    """Per-point MLP followed by a max-pool to a 64-d global feature."""

    arch: str = "mini"
    prefix: str = "enc."

    @property
    def layers(self):
        return len(_ENCODER_WIDTHS[self.arch]) - 1

    def init_params(self, rng):
        return _init_mlp(rng, _ENCODER_WIDTHS[self.arch], self.prefix)


@dataclass
class TaskModel:
    """A pretrained task network of one kind and architecture."""

    task_kind: str
    arch: str
    seed: int
    params: dict
    m: int = 64
    num_classes: int = NUM_CLASSES
    frozen: bool = False
    classification_loss: str = "ce"
    dataset: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def uid(self):
        """``kind:arch:seed``, suffixed with ``@<dataset hash>`` once the training data is known."""
        base = f"{self.task_kind}:{self.arch}:{self.seed}"
        return f"{base}@{self.dataset}" if self.dataset else base

    @property
    def encoder(self):
        return Encoder(self.arch)

    def freeze(self):
        for value in self.params.values():
            value.requires_grad = False
        self.frozen = True
        return self

    def fingerprint(self):
        """Bytes of every parameter, for bit-level immutability checks."""
        return b"".join(self.params[k].data.tobytes() for k in sorted(self.params))


@dataclass
class SamplerModel:
    """The learnable sampler: encoder, point generator and soft projection."""

    n: int
    m: int = 64
    k_proj: int = 4
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def encoder(self):
        return Encoder("mini")

    @property
    def temperature(self):
        return float(np.exp(self.params["log_temperature"].data))

    def parameter_names(self):
        return list(self.params.keys())


@dataclass
class ModelPool:
    """Frozen models of one task, split into disjoint train and test sets."""

    task_kind: str
    train_models: list
    test_models: list

    def __post_init__(self):
        assert_disjoint(self.train_models, self.test_models, "pool train/test")

    @property
    def uids(self):
        return {m.uid for m in self.train_models + self.test_models}


def assert_disjoint(first, second, what):
    """Raise PoolOverlapError when two model collections share a UID."""
    uids_a = {m if isinstance(m, str) else m.uid for m in first}
    uids_b = {m if isinstance(m, str) else m.uid for m in second}
    overlap = uids_a & uids_b
    if overlap:
        raise PoolOverlapError(f"{what}: model UIDs overlap: {sorted(overlap)}", overlap)


def require_frozen(model):
    if not model.frozen:
        raise ContractViolation(f"{model.uid}: task model must be frozen inside sampler training")


# ── Construction ────────────────────────────────────────────────────────────


def _head_out(kind, m, num_classes):
    return {
        "classification": num_classes,
        "reconstruction": m * 3,
        "retrieval": 1,
        "pose_regression": 6,
    }[kind]


def _head_in(kind):
    return 2 * FEATURE_DIM if kind in PAIR_KINDS else FEATURE_DIM


def init_task_model(kind, seed, arch="mini", m=64, num_classes=NUM_CLASSES, classification_loss="ce",
                    dataset=""):
    """Build an untrained task network with weights drawn from ``seed``.

    ``dataset`` is the spec hash of the data the model is trained on; it
    becomes part of the model UID.
    """
    if arch not in _ENCODER_WIDTHS:
        raise ContractViolation(f"unknown architecture {arch!r}")
    if classification_loss not in CLASSIFICATION_LOSSES:
        raise ContractViolation(f"unknown classification loss {classification_loss!r}")
    rng = np.random.default_rng(seed)
    params = Encoder(arch).init_params(rng)
    widths = (_head_in(kind), _HEAD_HIDDEN[arch], _head_out(kind, m, num_classes))
    params.update(_init_mlp(rng, widths, "head."))
    return TaskModel(task_kind=kind, arch=arch, seed=seed, params=params, m=m, num_classes=num_classes,
                     classification_loss=classification_loss, dataset=dataset)


def init_sampler(n, m=64, k_proj=4, seed=0, temperature=1.0):
    """Build an untrained sampler emitting ``n`` points for ``m``-point inputs."""
    if n >= m:
        raise ContractViolation(f"sampler needs n < m, got n={n} m={m}")
    if k_proj < 1 or k_proj > m:
        raise ContractViolation(f"k_proj must be in [1, m], got {k_proj}")
    rng = np.random.default_rng(seed)
    params = Encoder("mini").init_params(rng)
    params.update(_init_mlp(rng, (FEATURE_DIM, FEATURE_DIM, n * 3), "gen."))
    params["log_temperature"] = T.Tensor(np.log(temperature))
    return SamplerModel(n=n, m=m, k_proj=k_proj, params=params, meta={"init_seed": seed})


def clone_sampler(sampler, requires_grad=False):
    """Deep copy of a sampler's parameters (evaluation never shares tensors)."""
    params = {k: T.Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in sampler.params.items()}
    return SamplerModel(n=sampler.n, m=sampler.m, k_proj=sampler.k_proj, params=params, meta=dict(sampler.meta))


# ── Forward passes ──────────────────────────────────────────────────────────


def encode(encoder, cloud, params):
    """Global feature of one cloud: column-wise max over per-point features.

    Args:
        encoder: Encoder describing the layer count and parameter prefix.
        cloud: ``(m, 3)`` array or tensor, m >= 1.
        params: Dict holding the encoder weights.

    Returns:
        ``(64,)`` tensor.
    """
    x = cloud if isinstance(cloud, T.Tensor) else T.Tensor(cloud)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractViolation(f"encode: expected (m>=1, 3) cloud, got {x.shape}")
    h = _mlp(x, params, encoder.prefix, encoder.layers, final_relu=True)
    feature, _ = T.max(h, axis=0)
    return feature


def _head(model, feature, params):
    row = T.reshape(feature, (1, feature.shape[0]))
    out = _mlp(row, params, "head.", 2, final_relu=False)
    return T.reshape(out, (out.shape[1],))


def task_forward(model, inputs, params=None):
    """Run a task network.

    Args:
        model: TaskModel.
        inputs: One cloud, or a ``(first, second)`` pair for retrieval and
            pose regression.
        params: Optional parameter override.

    Returns:
        classification: ``(C,)`` logits. reconstruction: ``(m, 3)`` cloud.
        retrieval: scalar match probability. pose_regression:
        ``(euler_deg (3,), t (3,))``.
    """
    params = params or model.params
    kind = model.task_kind
    is_pair = isinstance(inputs, (tuple, list))
    if is_pair != (kind in PAIR_KINDS):
        raise ContractViolation(f"task_forward: {kind} got {'a pair' if is_pair else 'one cloud'}")
    encoder = model.encoder
    if kind == "classification":
        return _head(model, encode(encoder, inputs, params), params)
    if kind == "reconstruction":
        out = _head(model, encode(encoder, inputs, params), params)
        return T.reshape(out, (model.m, 3))
    first = encode(encoder, inputs[0], params)
    second = encode(encoder, inputs[1], params)
    if kind == "retrieval":
        feats = T.concat([T.absolute(T.sub(first, second)), T.mul(first, second)], axis=0)
        return T.reshape(T.sigmoid(_head(model, feats, params)), ())
    out = _head(model, T.concat([first, second], axis=0), params)
    euler = T.scale(T.gather(out, [0, 1, 2]), POSE_ANGLE_SCALE)
    return euler, T.gather(out, [3, 4, 5])


@dataclass
class SamplerOutput:
    """Result of one soft-sampling pass."""

    soft: object
    raw: object
    weights: object
    neighbor_idx: np.ndarray


def sampler_forward(sampler, cloud, params=None):
    """Generate n points and softly project them onto the input cloud.

    Each generated point q is replaced by a softmax(-d^2 / t^2) weighted
    average of its ``k_proj`` nearest input points.

    Args:
        sampler: SamplerModel.
        cloud: ``(m, 3)`` input array.
        params: Optional parameter override (adapted weights).

    Returns:
        SamplerOutput with soft ``(n, 3)`` points, raw generator output,
        ``(n, k_proj)`` weights and neighbor indices.
    """
    params = params or sampler.params
    points = geometry.as_cloud(cloud)
    m = points.shape[0]
    n, k = sampler.n, sampler.k_proj
    if n >= m:
        raise ContractViolation(f"sampler_forward: need n < m, got n={n} m={m}")
    if k > m:
        raise ContractViolation(f"sampler_forward: k_proj={k} exceeds m={m}")

    feature = encode(sampler.encoder, points, params)
    row = T.reshape(feature, (1, FEATURE_DIM))
    raw = T.reshape(_mlp(row, params, "gen.", 2, final_relu=False), (n, 3))
    soft, weights, neighbor_idx = soft_project(raw, points, params["log_temperature"], k)
    return SamplerOutput(soft=soft, raw=raw, weights=weights, neighbor_idx=neighbor_idx)


def soft_project(raw, points, log_temperature, k):
    """Project generated points onto their k nearest input points.

    Args:
        raw: ``(n, 3)`` tensor of generated points.
        points: ``(m, 3)`` input array (constant).
        log_temperature: Scalar tensor; the temperature is its exponential.
        k: Neighborhood size.

    Returns:
        Tuple of (soft ``(n, 3)`` tensor, ``(n, k)`` weight tensor,
        ``(n, k)`` neighbor index array, nearest first, ties to lowest index).
    """
    n = raw.shape[0]
    diff = raw.data[:, None, :] - points[None, :, :]
    order = np.argsort((diff * diff).sum(axis=2), axis=1, kind="stable")
    neighbor_idx = order[:, :k]
    neighbors = points[neighbor_idx.reshape(-1)]

    repeated = T.gather(raw, np.repeat(np.arange(n), k))
    offsets = T.sub(repeated, T.Tensor(neighbors))
    sq_dist = T.reshape(T.sum(T.square(offsets), axis=1), (n, k))
    inv_t2 = T.exp(T.scale(log_temperature, -2.0))
    weights = T.softmax(T.scale(sq_dist, T.neg(inv_t2)))

    columns = []
    for axis in range(3):
        coords = T.Tensor(neighbors[:, axis].reshape(n, k))
        columns.append(T.reshape(T.sum(T.mul(weights, coords), axis=1), (n, 1)))
    return T.concat(columns, axis=1), weights, neighbor_idx


def sampler_match(sampler, cloud, params=None):
    """Hard indices for inference: nearest input point of each soft point.

    Duplicates are dropped in generator order and the shortfall is filled by
    farthest point sampling seeded from the kept indices.

    Returns:
        List of exactly ``n`` distinct indices into ``cloud``.
    """
    points = geometry.as_cloud(cloud)
    with T.no_grad():
        soft = sampler_forward(sampler, points, params).soft.data
    diff = soft[:, None, :] - points[None, :, :]
    nearest = np.argmin((diff * diff).sum(axis=2), axis=1)
    kept = list(dict.fromkeys(int(i) for i in nearest))
    if len(kept) < sampler.n:
        kept = geometry.farthest_point_sample(points, sampler.n, chosen=kept)
    return kept


# ── Pretraining ─────────────────────────────────────────────────────────────


def _bar_reached(kind, metric, bars):
    if kind in ("classification", "retrieval"):
        return metric >= bars[kind]
    return metric <= bars[kind]


def pretrain_task_models(kind, count, seeds, dataset, n_train=None, arch="mini",
                         max_epochs=60, min_epochs=3, lr=1e-3, batch_size=24,
                         bars=None, classification_loss="ce", verbose=False):
    """Train ``count`` task networks on unsampled clouds and freeze them.

    Args:
        kind: Task kind.
        count: Number of models.
        seeds: Distinct weight-initialisation seeds, one per model.
        dataset: data.Dataset with train and val splits.
        n_train: Models placed in the train sub-pool (rest go to test);
            defaults to half of ``count`` rounded up.
        arch: "mini" or "wide".
        max_epochs: Epoch cap before declaring failure.
        min_epochs: Epochs always run before the bar is checked.
        lr: Adam learning rate.
        batch_size: Examples per step.
        bars: Optional override of the convergence bars.
        classification_loss: "ce" or "bce"; only read for classification.
        verbose: Show progress bars.

    Returns:
        ModelPool of frozen models.

    Raises:
        PretrainingFailure: If a model misses its bar within ``max_epochs``.
    """
    from metasampler import data as data_mod
    from metasampler import training

    seeds = list(seeds)
    if len(seeds) != count or len(set(seeds)) != count:
        raise ContractViolation(f"pretrain: need {count} distinct seeds, got {seeds}")
    if bars is None:
        bars = training.convergence_bars(dataset)

    models = []
    for seed in tqdm(seeds, desc=f"Pretraining {kind}", disable=not verbose):
        model = init_task_model(kind, seed, arch=arch, m=dataset.spec.m, classification_loss=classification_loss,
                                dataset=dataset.spec.spec_hash())
        for value in model.params.values():
            value.requires_grad = True
        examples = data_mod.make_examples(kind, dataset, "train", seed=seed)
        optimizer = optim.Adam(model.params, lr)
        metric = None
        for epoch in range(1, max_epochs + 1):
            loss = training.fit_task_model_epoch(model, examples, optimizer, seed=seed * 7919 + epoch,
                                                 batch_size=batch_size)
            if epoch < min_epochs:
                continue
            metric = training.task_model_metric(model, dataset, "val", seed=seed)
            logger.debug("pretrain %s seed=%d epoch=%d loss=%.5f metric=%.5f", kind, seed, epoch, loss, metric)
            if _bar_reached(kind, metric, bars):
                break
        if metric is None or not _bar_reached(kind, metric, bars):
            raise PretrainingFailure(
                f"{kind} model with seed {seed} missed its bar ({metric} vs {bars[kind]})",
                seed=seed, metric=metric,
            )
        model.meta.update({"epochs": epoch, "val_metric": metric, "lr": lr})
        logger.info("pretrained %s in %d epochs (val metric %.4f)", model.uid, epoch, metric)
        models.append(model.freeze())

    if n_train is None:
        n_train = (count + 1) // 2
    return ModelPool(kind, models[:n_train], models[n_train:])


# ── Checkpoints ─────────────────────────────────────────────────────────────


def _write_checkpoint(path, manifest, params):
    names = list(params.keys())
    manifest = dict(manifest, names=names, shapes=[list(params[k].shape) for k in names])
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for name in names:
            f.write(T.tensor_to_bytes(params[name]))
    return path


def _read_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    head, sep, body = buf.partition(b"\n")
    if not sep:
        raise FormatError(f"{path}: missing checkpoint manifest")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: bad manifest ({exc})") from exc
    params, offset = {}, 0
    for name in manifest["names"]:
        params[name], offset = T.tensor_from_bytes(body, offset)
    return manifest, params


def save_checkpoint(model, path):
    """Write a TaskModel or SamplerModel as a manifest line plus TSR1 records."""
    if isinstance(model, TaskModel):
        manifest = {
            "type": "task_model", "task_kind": model.task_kind, "arch": model.arch, "seed": model.seed,
            "uid": model.uid, "m": model.m, "num_classes": model.num_classes, "frozen": model.frozen,
            "classification_loss": model.classification_loss, "dataset": model.dataset,
            "meta": model.meta,
        }
    else:
        manifest = {"type": "sampler", "n": model.n, "m": model.m, "k_proj": model.k_proj, "meta": model.meta}
    return _write_checkpoint(path, manifest, model.params)


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``."""
    manifest, params = _read_checkpoint(path)
    if manifest.get("type") == "task_model":
        model = TaskModel(
            task_kind=manifest["task_kind"], arch=manifest["arch"], seed=manifest["seed"], params=params,
            m=manifest["m"], num_classes=manifest["num_classes"], meta=manifest.get("meta", {}),
            classification_loss=manifest.get("classification_loss", "ce"), dataset=manifest.get("dataset", ""),
        )
        return model.freeze() if manifest.get("frozen") else model
    if manifest.get("type") == "sampler":
        return SamplerModel(n=manifest["n"], m=manifest["m"], k_proj=manifest["k_proj"], params=params,
                            meta=manifest.get("meta", {}))
    raise FormatError(f"{path}: unknown checkpoint type {manifest.get('type')!r}")


def save_pool(pool, directory):
    """Write one checkpoint per model plus ``pool.json`` naming the split."""
    os.makedirs(directory, exist_ok=True)
    entry = {"task_kind": pool.task_kind, "train": [], "test": []}
    for split, models in (("train", pool.train_models), ("test", pool.test_models)):
        for model in models:
            filename = f"{model.task_kind}-{model.arch}-{model.seed}.ckpt"
            save_checkpoint(model, os.path.join(directory, filename))
            entry[split].append(filename)
    with open(os.path.join(directory, "pool.json"), "w", encoding="utf-8") as f:
        json.dump(entry, f, indent=2, sort_keys=True)
    return directory


def load_pool(directory):
    with open(os.path.join(directory, "pool.json"), "r", encoding="utf-8") as f:
        entry = json.load(f)
    train = [load_checkpoint(os.path.join(directory, name)) for name in entry["train"]]
    test = [load_checkpoint(os.path.join(directory, name)) for name in entry["test"]]
    return ModelPool(entry["task_kind"], train, test)
