"""Point-cloud primitives, classical samplers and point-cloud file formats.

A point cloud is an ``(m, 3)`` float64 numpy array. Functions that feed a
loss (``chamfer_distance``, ``apply_rigid_tensor``) also accept tensors and
stay differentiable.
"""

import math
import struct

import numpy as np

from metasampler import tensor as T
from metasampler.errors import ContractViolation, DegenerateInputError, FormatError

_PCB_MAGIC = b"PCB1"


def as_cloud(points):
    """Return ``points`` as an ``(m, 3)`` float64 array, checking shape."""
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < 1:
        raise ContractViolation(f"point cloud must be (m>=1, 3), got {cloud.shape}")
    return cloud


def normalize(points):
    """Center on the centroid and scale the farthest point to norm 1.

    Args:
        points: ``(m, 3)`` array.

    Returns:
        Normalized ``(m, 3)`` array.

    Raises:
        DegenerateInputError: If every point is identical.
    """
    cloud = as_cloud(points)
    if not np.all(np.isfinite(cloud)):
        raise ContractViolation("normalize: non-finite coordinates")
    centered = cloud - cloud.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1)).max()
    if radius < 1e-12:
        raise DegenerateInputError("normalize: all points are identical")
    return centered / radius


def _sq_dist_to(points, index):
    diff = points - points[index]
    return (diff * diff).sum(axis=1)


def farthest_point_sample(points, n, start=0, chosen=None):
    """Greedy farthest point sampling.

    Args:
        points: ``(m, 3)`` array.
        n: Number of indices to return.
        start: First index when ``chosen`` is empty.
        chosen: Optional indices already selected; FPS continues from them
            and they lead the returned list.

    Returns:
        List of ``n`` distinct indices; ties go to the lowest index.
    """
    cloud = as_cloud(points)
    m = cloud.shape[0]
    if n < 1 or n > m:
        raise ContractViolation(f"farthest_point_sample: need 1 <= n <= m, got n={n} m={m}")
    picked = list(chosen) if chosen else [int(start)]
    if not 0 <= picked[0] < m:
        raise ContractViolation(f"farthest_point_sample: start {picked[0]} out of range")
    min_dist = np.full(m, np.inf)
    for idx in picked:
        min_dist = np.minimum(min_dist, _sq_dist_to(cloud, idx))
    min_dist[picked] = -np.inf
    while len(picked) < n:
        nxt = int(np.argmax(min_dist))
        picked.append(nxt)
        min_dist = np.minimum(min_dist, _sq_dist_to(cloud, nxt))
        min_dist[picked] = -np.inf
    return picked[:n]


def random_sample(points, n, seed):
    """Uniform sample of ``n`` distinct indices, deterministic given ``seed``."""
    m = as_cloud(points).shape[0]
    if n < 1 or n > m:
        raise ContractViolation(f"random_sample: need 1 <= n <= m, got n={n} m={m}")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(m, size=n, replace=False)]


def inverse_density_sample(points, n, k=4):
    """Keep the ``n`` sparsest points.

    The sparsity score of a point is the sum of distances to its ``k``
    nearest neighbors; scores are rounded to 12 decimals so exact geometric
    ties resolve to the lowest index.
    """
    cloud = as_cloud(points)
    m = cloud.shape[0]
    if n < 1 or n > m or k < 1 or k >= m:
        raise ContractViolation(f"inverse_density_sample: need n <= m and 1 <= k < m, got n={n} k={k} m={m}")
    diff = cloud[:, None, :] - cloud[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    nearest = np.sort(dist, axis=1)[:, :k]
    score = np.round(nearest.sum(axis=1), 12)
    order = np.argsort(-score, kind="stable")
    return [int(i) for i in order[:n]]


def chamfer_distance(a, b):
    """Two-way Chamfer distance with squared, mean-reduced nearest distances.

    Args:
        a: ``(p, 3)`` array or tensor.
        b: ``(q, 3)`` array or tensor.

    Returns:
        Scalar tensor, differentiable with respect to tensor inputs.
    """
    a = a if isinstance(a, T.Tensor) else T.Tensor(a)
    b = b if isinstance(b, T.Tensor) else T.Tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractViolation(f"chamfer_distance: empty or malformed clouds {a.shape}, {b.shape}")
    dist = T.pairwise_sq_dist(a, b)
    forward, _ = T.min(dist, axis=1)
    backward, _ = T.min(dist, axis=0)
    return T.add(T.mean(forward), T.mean(backward))


def chamfer_value(a, b):
    """Chamfer distance as a float, without recording a graph."""
    with T.no_grad():
        return chamfer_distance(a, b).item()


def rigid_matrix(euler_deg):
    """Rotation matrix R = Rz @ Ry @ Rx for ``euler_deg = (z, y, x)`` in degrees."""
    z, y, x = np.radians(np.asarray(euler_deg, dtype=np.float64))
    cz, sz, cy, sy, cx, sx = math.cos(z), math.sin(z), math.cos(y), math.sin(y), math.cos(x), math.sin(x)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


def apply_rigid(points, euler_deg, t):
    """Rotate each point by ``rigid_matrix(euler_deg)`` then translate by ``t``."""
    cloud = np.asarray(points, dtype=np.float64)
    return cloud @ rigid_matrix(euler_deg).T + np.asarray(t, dtype=np.float64)


# Constant bases: R_axis(c, s) = c * COS + s * SIN + FIXED
_BASES = {
    "z": (np.diag([1.0, 1.0, 0.0]), np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], float), np.diag([0.0, 0.0, 1.0])),
    "y": (np.diag([1.0, 0.0, 1.0]), np.array([[0, 0, 1], [0, 0, 0], [-1, 0, 0]], float), np.diag([0.0, 1.0, 0.0])),
    "x": (np.diag([0.0, 1.0, 1.0]), np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], float), np.diag([1.0, 0.0, 0.0])),
}


def rigid_matrix_tensor(euler_deg):
    """Differentiable ``rigid_matrix`` for a ``(3,)`` tensor of degrees."""
    radians = T.scale(euler_deg, math.pi / 180.0)
    result = None
    for position, axis in enumerate("zyx"):
        angle = T.reshape(T.gather(radians, [position]), ())
        cos_basis, sin_basis, fixed = _BASES[axis]
        rot = T.add(
            T.add(T.scale(T.Tensor(cos_basis), T.cos(angle)), T.scale(T.Tensor(sin_basis), T.sin(angle))),
            T.Tensor(fixed),
        )
        result = rot if result is None else T.matmul(result, rot)
    return result


def apply_rigid_tensor(points, euler_deg, t):
    """Differentiable ``apply_rigid`` with tensor angles and translation."""
    cloud = points if isinstance(points, T.Tensor) else T.Tensor(points)
    rot = rigid_matrix_tensor(euler_deg)
    shift = T.matmul(T.ones((cloud.shape[0], 1)), T.reshape(t, (1, 3)))
    return T.add(T.matmul(cloud, T.transpose(rot)), shift)


def rotation_error_deg(r_true, r_pred):
    """Geodesic angle in degrees between two rotation matrices."""
    cos_angle = (np.trace(np.asarray(r_true).T @ np.asarray(r_pred)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0))))


def min_pairwise_distance(points):
    """Smallest distance between two distinct rows."""
    cloud = as_cloud(points)
    diff = cloud[:, None, :] - cloud[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    return float(dist.min())


# ── File formats ────────────────────────────────────────────────────────────


def write_pcb(path, points):
    """Write PCB1: magic, u32 count, f32 xyz triples (little-endian)."""
    cloud = as_cloud(points)
    with open(path, "wb") as f:
        f.write(_PCB_MAGIC + struct.pack("<I", cloud.shape[0]))
        f.write(cloud.astype("<f4").tobytes(order="C"))
    return path


def read_pcb(path):
    """Read a PCB1 file into an ``(m, 3)`` float64 array.

    Raises:
        FormatError: On a bad magic or truncated payload.
    """
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != _PCB_MAGIC or len(buf) < 8:
        raise FormatError(f"{path}: not a PCB1 file")
    (count,) = struct.unpack_from("<I", buf, 4)
    payload = buf[8:]
    if len(payload) != count * 12:
        raise FormatError(f"{path}: expected {count} points, payload has {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(count, 3)


def read_xyz(path):
    """Read a plain-text cloud with one ``x y z`` triple per line."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3:
                raise FormatError(f"{path}: malformed line {line!r}")
            rows.append([float(v) for v in parts[:3]])
    return as_cloud(rows)


def write_xyz(path, points):
    cloud = as_cloud(points)
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in cloud:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    return path
