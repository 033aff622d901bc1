"""Synthetic shape dataset, task example builders and dataset persistence."""

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.neighbors import NearestNeighbors
from tqdm import tqdm

from metasampler import geometry
from metasampler.config import DatasetSpec
from metasampler.errors import ContractViolation, FormatError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_MASK64 = (1 << 64) - 1

# Retrieval candidates are rigid copies: small rotation and shift
RETRIEVAL_ROTATION_DEG = 20.0
RETRIEVAL_SHIFT = 0.1
# Registration templates: euler in [-45, 45]^3, t in [-1, 1]^3
REGISTRATION_ROTATION_DEG = 45.0
REGISTRATION_SHIFT = 1.0


@dataclass(frozen=True)
class ShapeClass:
    """One primitive family; ``aspect`` bounds the per-instance axis ratios."""

    id: int
    kind: str
    aspect: tuple = (0.7, 1.0)
    shift_aspect: tuple = (0.25, 0.5)


SHAPE_CLASSES = (
    ShapeClass(0, "sphere", (1.0, 1.0), (1.0, 1.0)),
    ShapeClass(1, "cube"),
    ShapeClass(2, "cylinder", (0.4, 0.7), (0.15, 0.3)),
    ShapeClass(3, "cone", (0.4, 0.7), (0.15, 0.3)),
    ShapeClass(4, "torus", (0.25, 0.4), (0.1, 0.2)),
    ShapeClass(5, "tetrahedron"),
    ShapeClass(6, "ellipsoid", (0.4, 0.7), (0.15, 0.3)),
    ShapeClass(7, "helix", (0.3, 0.5), (0.6, 1.0)),
)

# Per-class frequency multipliers in the shifted regime
_SHIFT_SKEW = np.linspace(1.5, 0.5, len(SHAPE_CLASSES))


def derive_seed(seed, index):
    """splitmix64 of ``(seed, index)``, shifted to a nonnegative 63-bit int."""
    z = (int(seed) * 0x9E3779B97F4A7C15 + int(index) + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) >> 1


# ── Surface samplers ────────────────────────────────────────────────────────


def _unit_vectors(rng, count):
    v = rng.normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, m, aspect):
    # Antipodal pairs keep the centroid at the origin.
    half = _unit_vectors(rng, (m + 1) // 2)
    return np.concatenate([half, -half])[:m]


def _ellipsoid(rng, m, aspect):
    return _unit_vectors(rng, m) * np.array([1.0, aspect[0], aspect[1]])


def _box(rng, m, aspect):
    extent = np.array([1.0, aspect[0], aspect[1]])
    areas = np.array([extent[1] * extent[2], extent[0] * extent[2], extent[0] * extent[1]])
    axis = rng.choice(3, size=m, p=areas / areas.sum())
    points = rng.uniform(-1.0, 1.0, size=(m, 3))
    points[np.arange(m), axis] = rng.choice([-1.0, 1.0], size=m)
    return points * extent


def _cylinder(rng, m, aspect):
    radius = aspect[0]
    side, cap = 2.0 * np.pi * radius * 2.0, 2.0 * np.pi * radius * radius
    on_side = rng.uniform(size=m) < side / (side + cap)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=m)
    r = np.where(on_side, radius, radius * np.sqrt(rng.uniform(size=m)))
    z = np.where(on_side, rng.uniform(-1.0, 1.0, size=m), rng.choice([-1.0, 1.0], size=m))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _cone(rng, m, aspect):
    radius = aspect[0]
    slant = np.sqrt(radius * radius + 4.0)
    lateral, base = np.pi * radius * slant, np.pi * radius * radius
    on_side = rng.uniform(size=m) < lateral / (lateral + base)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=m)
    height = np.sqrt(rng.uniform(size=m))  # area grows linearly with distance from the apex
    r = np.where(on_side, radius * height, radius * np.sqrt(rng.uniform(size=m)))
    z = np.where(on_side, 1.0 - 2.0 * height, -1.0)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, m, aspect):
    tube = aspect[0]
    u = rng.uniform(0.0, 2.0 * np.pi, size=m)
    v = rng.uniform(0.0, 2.0 * np.pi, size=m)
    ring = 1.0 + tube * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), tube * np.sin(v)], axis=1)


_TETRA = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
_TETRA_FACES = ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))


def _tetrahedron(rng, m, aspect):
    verts = _TETRA * np.array([1.0, aspect[0], aspect[1]])
    faces = verts[np.array(_TETRA_FACES)]
    areas = 0.5 * np.linalg.norm(np.cross(faces[:, 1] - faces[:, 0], faces[:, 2] - faces[:, 0]), axis=1)
    face = rng.choice(4, size=m, p=areas / areas.sum())
    a, b = rng.uniform(size=m), rng.uniform(size=m)
    flip = a + b > 1.0
    a, b = np.where(flip, 1.0 - a, a), np.where(flip, 1.0 - b, b)
    tri = faces[face]
    return tri[:, 0] + a[:, None] * (tri[:, 1] - tri[:, 0]) + b[:, None] * (tri[:, 2] - tri[:, 0])


def _helix(rng, m, aspect):
    turns = 2.0 + 2.0 * aspect[1]
    s = rng.uniform(0.0, 1.0, size=m)
    angle = 2.0 * np.pi * turns * s
    tube = 0.05 * _unit_vectors(rng, m)
    return np.stack([np.cos(angle), np.sin(angle), (2.0 * s - 1.0) * (1.0 + aspect[0])], axis=1) + tube


_SAMPLERS = {
    "sphere": _sphere,
    "ellipsoid": _ellipsoid,
    "cube": _box,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "tetrahedron": _tetrahedron,
    "helix": _helix,
}


def _density_biased(rng, surface, m, aspect):
    """Draw 4m surface points and keep m, favoring one side (scanner-like density)."""
    candidates = surface(rng, 4 * m, aspect)
    z = candidates[:, 2] / (np.abs(candidates[:, 2]).max() + 1e-12)
    weights = np.exp(1.5 * z)
    keep = rng.choice(4 * m, size=m, replace=False, p=weights / weights.sum())
    return candidates[np.sort(keep)]


def gen_shape(class_id, instance_seed, m, jitter=0.01, rotation_deg=180.0, shift=False):
    """Sample one normalized cloud of a shape class.

    Args:
        class_id: Index into ``SHAPE_CLASSES``.
        instance_seed: Seed of this instance (aspect, rotation, jitter).
        m: Number of points, at least 8.
        jitter: Gaussian noise sigma before normalization.
        rotation_deg: Euler angles are drawn from [-rotation_deg, rotation_deg].
        shift: Use the shifted parameter regime.

    Returns:
        ``(m, 3)`` float64 array, centered with max norm 1.
    """
    if m < 8:
        raise ContractViolation(f"gen_shape: m must be >= 8, got {m}")
    if not 0 <= class_id < len(SHAPE_CLASSES):
        raise ContractViolation(f"gen_shape: unknown class {class_id}")
    cls = SHAPE_CLASSES[class_id]
    rng = np.random.default_rng(instance_seed)
    lo, hi = cls.shift_aspect if shift else cls.aspect
    aspect = (rng.uniform(lo, hi), rng.uniform(lo, hi))
    surface = _SAMPLERS[cls.kind]
    if shift and cls.kind != "sphere":
        points = _density_biased(rng, surface, m, aspect)
    else:
        points = surface(rng, m, aspect)
    euler = rng.uniform(-rotation_deg, rotation_deg, size=3)
    points = geometry.apply_rigid(points, euler, np.zeros(3))
    if jitter > 0:
        points = points + rng.normal(scale=jitter, size=points.shape)
    return geometry.normalize(points)


# ── Dataset ─────────────────────────────────────────────────────────────────


@dataclass
class ShapeSet:
    """Clouds of one split: ``clouds`` is ``(N, m, 3)``."""

    clouds: np.ndarray
    labels: np.ndarray
    seeds: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return ShapeSet(self.clouds[indices], self.labels[indices], [self.seeds[i] for i in indices])

    def sample(self, count, seed):
        """Seeded subset of at most ``count`` items, kept in split order."""
        if count >= len(self):
            return self
        picked = np.sort(np.random.default_rng(seed).permutation(len(self))[:count])
        return self.take(picked)


@dataclass
class Dataset:
    spec: DatasetSpec
    splits: dict

    def split(self, name):
        if name not in self.splits:
            raise ContractViolation(f"unknown split {name!r}")
        return self.splits[name]


def split_counts(spec):
    """Per-class item counts for every split."""
    base = {"train": spec.train_per_class, "val": spec.val_per_class, "test": spec.test_per_class}
    counts = {}
    for name, per_class in base.items():
        if spec.distribution_shift:
            counts[name] = [int(round(per_class * s)) for s in _SHIFT_SKEW]
        else:
            counts[name] = [per_class] * len(SHAPE_CLASSES)
    return counts


def gen_dataset(spec, verbose=False):
    """Generate the train/val/test splits of a synthetic dataset.

    Each item's seed is derived from ``(spec.seed, regime, split, class,
    item)``, so splits are disjoint by construction and any item can be
    regenerated on its own.

    Args:
        spec: DatasetSpec.
        verbose: Show a progress bar.

    Returns:
        Dataset.
    """
    spec.validate()
    jitter = spec.jitter * (2.0 if spec.distribution_shift else 1.0)
    regime_seed = derive_seed(spec.seed, 1 if spec.distribution_shift else 0)
    splits = {}
    for split_idx, (name, counts) in enumerate(split_counts(spec).items()):
        clouds, labels, seeds = [], [], []
        for class_id, count in enumerate(tqdm(counts, desc=f"Generating {name}", disable=not verbose)):
            for item in range(count):
                seed = derive_seed(regime_seed, (split_idx << 40) | (class_id << 24) | item)
                clouds.append(gen_shape(class_id, seed, spec.m, jitter, spec.rotation_deg, spec.distribution_shift))
                labels.append(class_id)
                seeds.append(seed)
        array = np.stack(clouds) if clouds else np.zeros((0, spec.m, 3))
        splits[name] = ShapeSet(array, np.array(labels, dtype=np.int64), seeds)
    logger.info("generated dataset %s: %s", spec.spec_hash(), {k: len(v) for k, v in splits.items()})
    return Dataset(spec=spec, splits=splits)


def mean_nn_spacing(clouds):
    """Mean distance from each point to its nearest other point, over all clouds."""
    spacings = []
    for cloud in clouds:
        nn = NearestNeighbors(n_neighbors=2, algorithm="brute").fit(cloud)
        dist, _ = nn.kneighbors(cloud)
        spacings.append(dist[:, 1].mean())
    return float(np.mean(spacings))


# ── Episodes and pairs ──────────────────────────────────────────────────────


def _random_rigid(rng, rotation_deg, shift):
    euler = rng.uniform(-rotation_deg, rotation_deg, size=3)
    t = rng.uniform(-shift, shift, size=3)
    return euler, t


@dataclass
class RetrievalEpisode:
    query: np.ndarray
    candidates: list
    answer: int
    query_index: int


def gen_retrieval_episode(shapes, n_ways, seed):
    """One N-way retrieval episode.

    The answer is a rigid copy of the query. Every candidate, answer and
    distractors alike, gets its own independent random rigid transform from
    the same range, so being moved is not a cue. One distractor shares the
    query's class when the split has another such cloud.

    Args:
        shapes: ShapeSet to draw from.
        n_ways: Number of candidates N >= 2.
        seed: Episode seed.

    Returns:
        RetrievalEpisode.

    Raises:
        ContractViolation: If N < 2 or the split has fewer than N clouds.
    """
    if n_ways < 2:
        raise ContractViolation(f"retrieval episode needs N >= 2, got {n_ways}")
    if len(shapes) < n_ways:
        raise ContractViolation(f"retrieval episode needs {n_ways} clouds, split has {len(shapes)}")
    rng = np.random.default_rng(seed)
    query_idx = int(rng.integers(len(shapes)))
    label = shapes.labels[query_idx]
    others = [i for i in range(len(shapes)) if i != query_idx]
    same = [i for i in others if shapes.labels[i] == label]
    distractors = []
    if same:
        distractors.append(int(same[rng.integers(len(same))]))
    rest = [i for i in others if i not in distractors]
    distractors += [int(i) for i in rng.choice(rest, size=n_ways - 1 - len(distractors), replace=False)]

    candidates = [shapes.clouds[query_idx]] + [shapes.clouds[i] for i in distractors]
    moved = []
    for cloud in candidates:
        euler, t = _random_rigid(rng, RETRIEVAL_ROTATION_DEG, RETRIEVAL_SHIFT)
        moved.append(geometry.apply_rigid(cloud, euler, t))
    order = rng.permutation(n_ways)
    return RetrievalEpisode(
        query=shapes.clouds[query_idx],
        candidates=[moved[i] for i in order],
        answer=int(np.flatnonzero(order == 0)[0]),
        query_index=query_idx,
    )


@dataclass
class RegistrationPair:
    source: np.ndarray
    template: np.ndarray
    euler: np.ndarray
    t: np.ndarray


def gen_registration_pair(shapes, seed, index=None):
    """Source cloud plus a template moved by euler in [-45, 45]^3 and t in [-1, 1]^3."""
    if len(shapes) == 0:
        raise ContractViolation("registration pair needs a nonempty split")
    rng = np.random.default_rng(seed)
    idx = int(rng.integers(len(shapes))) if index is None else int(index)
    euler, t = _random_rigid(rng, REGISTRATION_ROTATION_DEG, REGISTRATION_SHIFT)
    source = shapes.clouds[idx]
    return RegistrationPair(source=source, template=geometry.apply_rigid(source, euler, t), euler=euler, t=t)


def make_examples(kind, dataset, split, seed=0, count=None):
    """Example dicts a task model or sampler trains on.

    classification: ``{cloud, label}``; reconstruction: ``{cloud}``;
    retrieval: ``{cloud, other, match}`` with balanced positives (rigid
    copies) and negatives (half of them same-class); pose_regression:
    ``{cloud, other, euler, t}`` with ``other`` the moved template.
    """
    shapes = dataset.split(split)
    if count is not None:
        shapes = shapes.sample(count, seed)
    if kind == "classification":
        return [{"cloud": c, "label": int(y)} for c, y in zip(shapes.clouds, shapes.labels)]
    if kind == "reconstruction":
        return [{"cloud": c} for c in shapes.clouds]
    rng = np.random.default_rng(derive_seed(seed, len(shapes)))
    examples = []
    if kind == "retrieval":
        for i, cloud in enumerate(shapes.clouds):
            if rng.uniform() < 0.5:
                partner, match = cloud, True
            else:
                same = np.flatnonzero(shapes.labels == shapes.labels[i])
                pool = same[same != i] if rng.uniform() < 0.5 else np.flatnonzero(np.arange(len(shapes)) != i)
                if len(pool) == 0:
                    pool = np.flatnonzero(np.arange(len(shapes)) != i)
                partner, match = shapes.clouds[int(rng.choice(pool))], False
            euler, t = _random_rigid(rng, RETRIEVAL_ROTATION_DEG, RETRIEVAL_SHIFT)
            examples.append({"cloud": cloud, "other": geometry.apply_rigid(partner, euler, t), "match": match})
        return examples
    if kind == "pose_regression":
        for i in range(len(shapes)):
            pair = gen_registration_pair(shapes, derive_seed(seed, i), index=i)
            examples.append({"cloud": pair.source, "other": pair.template, "euler": pair.euler, "t": pair.t})
        return examples
    raise ContractViolation(f"unknown task kind {kind!r}")


# ── Persistence ─────────────────────────────────────────────────────────────


def save_dataset(dataset, directory):
    """Write one PCB1 file per cloud plus ``index.json``.

    Args:
        dataset: Dataset to persist.
        directory: Output directory (created if missing).

    Returns:
        Path of the index file.
    """
    items = []
    for name in SPLITS:
        shapes = dataset.splits[name]
        os.makedirs(os.path.join(directory, name), exist_ok=True)
        for i, (cloud, label, seed) in enumerate(zip(shapes.clouds, shapes.labels, shapes.seeds)):
            relpath = f"{name}/{i:05d}.pcb"
            geometry.write_pcb(os.path.join(directory, relpath), cloud)
            items.append({"split": name, "file": relpath, "label": int(label), "seed": int(seed)})
    index = {"spec": asdict(dataset.spec), "spec_hash": dataset.spec.spec_hash(), "items": items}
    path = os.path.join(directory, "index.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    return path


def load_dataset(directory):
    """Read a directory written by ``save_dataset``.

    Raises:
        FormatError: If the index does not match its spec hash.
    """
    with open(os.path.join(directory, "index.json"), "r", encoding="utf-8") as f:
        index = json.load(f)
    spec = DatasetSpec(**index["spec"])
    if spec.spec_hash() != index.get("spec_hash"):
        raise FormatError(f"{directory}: index spec hash mismatch")
    grouped = {name: ([], [], []) for name in SPLITS}
    for item in index["items"]:
        clouds, labels, seeds = grouped[item["split"]]
        clouds.append(geometry.read_pcb(os.path.join(directory, item["file"])))
        labels.append(item["label"])
        seeds.append(item["seed"])
    splits = {}
    for name, (clouds, labels, seeds) in grouped.items():
        array = np.stack(clouds) if clouds else np.zeros((0, spec.m, 3))
        splits[name] = ShapeSet(array, np.array(labels, dtype=np.int64), seeds)
    return Dataset(spec=spec, splits=splits)
