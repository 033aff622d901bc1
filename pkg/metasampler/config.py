"""Configuration dataclasses shared by the engines and the CLI."""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

from metasampler.errors import ContractViolation

TASK_KINDS = ("classification", "reconstruction", "retrieval", "pose_regression")
META_TASKS_DEFAULT = ("classification", "reconstruction", "retrieval")
ARCHES = ("mini", "wide")


@dataclass
class LossWeights:
    """Weights of the total sampler loss and the simplification internals."""

    w_task: float = 1.0
    w_simp: float = 1.0
    w_proj: float = 1.0
    gamma_max: float = 1.0
    gamma_cov: float = 1.0

    def validate(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ContractViolation(f"LossWeights.{name} must be nonnegative, got {value}")
        return self


@dataclass
class TrainConfig:
    """Single/joint sampler training and task adaptation settings."""

    batch_size: int = 24
    lr: float = 1e-3
    optimizer_kind: str = "adam"
    epochs: int = 10
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 1
    eval_size: int = 160
    retrieval_ways: int = 4

    def validate(self):
        if self.batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ContractViolation(f"lr must be > 0, got {self.lr}")
        if self.optimizer_kind not in ("adam", "sgd"):
            raise ContractViolation(f"unknown optimizer {self.optimizer_kind!r}")
        if self.epochs < 0 or self.eval_every < 1:
            raise ContractViolation("epochs must be >= 0 and eval_every >= 1")
        self.loss_weights.validate()
        return self


@dataclass
class MetaConfig:
    """Meta-training settings.

    ``tasks`` names the meta-training task kinds; the frozen pools themselves are
    passed to ``training.meta_train`` keyed by these names.
    """

    alpha: float = 1e-3
    beta: float = 1e-3
    inner_steps: int = 5
    iterations: int = 40
    batch_size: int = 24
    tasks: tuple = META_TASKS_DEFAULT
    second_order: bool = True
    aux_lr: float = 1e-3
    normalize_tasks: bool = False
    seed: int = 0

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractViolation("alpha and beta must be nonnegative")
        if self.inner_steps < 0:
            raise ContractViolation(f"inner_steps must be >= 0, got {self.inner_steps}")
        if not self.tasks:
            raise ContractViolation("meta-training needs at least one task")
        unknown = set(self.tasks) - set(TASK_KINDS)
        if unknown:
            raise ContractViolation(f"unknown task kinds: {sorted(unknown)}")
        if self.batch_size < 1 or self.aux_lr <= 0:
            raise ContractViolation("batch_size must be >= 1 and aux_lr > 0")
        return self


@dataclass
class DatasetSpec:
    """Synthetic shape dataset parameters."""

    m: int = 64
    train_per_class: int = 120
    val_per_class: int = 40
    test_per_class: int = 40
    jitter: float = 0.01
    rotation_deg: float = 180.0
    seed: int = 0
    distribution_shift: bool = False

    def validate(self):
        if self.m < 8:
            raise ContractViolation(f"m must be >= 8, got {self.m}")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 0:
            raise ContractViolation("split counts must be nonnegative")
        return self

    def spec_hash(self):
        return stable_hash(asdict(self))


@dataclass
class SampleSpec:
    """Input size m and sampled size n; ratio is reported as m/n."""

    m: int = 64
    n: int = 8

    @classmethod
    def from_ratio(cls, m, ratio):
        if ratio < 1 or m % ratio:
            raise ContractViolation(f"ratio {ratio} must divide m={m}")
        return cls(m=m, n=m // ratio)

    @property
    def ratio(self):
        return self.m / self.n

    def validate(self, allow_identity=False):
        if self.n < 1 or self.n > self.m or (self.n == self.m and not allow_identity):
            raise ContractViolation(f"need m > n >= 1, got m={self.m} n={self.n}")
        return self


@dataclass
class ExperimentConfig:
    """Everything one command ran with; embedded in every output."""

    command: str
    train: TrainConfig = field(default_factory=TrainConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    sample: SampleSpec = field(default_factory=SampleSpec)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        data = asdict(self)
        data["meta"]["tasks"] = list(self.meta.tasks)
        return data

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        train = dict(data["train"])
        train["loss_weights"] = LossWeights(**train["loss_weights"])
        meta = dict(data["meta"])
        meta["tasks"] = tuple(meta["tasks"])
        return cls(
            command=data["command"],
            train=TrainConfig(**train),
            meta=MetaConfig(**meta),
            dataset=DatasetSpec(**data["dataset"]),
            sample=SampleSpec(**data["sample"]),
            extra=data.get("extra", {}),
        )

    def config_hash(self):
        return stable_hash(self.to_dict())

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, "config.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
        return path


def stable_hash(obj):
    """First 16 hex chars of SHA-256 over canonical JSON."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def max_workers(requested=None):
    """Worker cap from ``METASAMPLER_THREADS`` (defaults to the CPU count)."""
    env = os.environ.get("METASAMPLER_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    if requested is None:
        return max(cap, 1)
    return max(min(requested, cap), 1)
