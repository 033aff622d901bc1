"""Metric logs, summary tables and sampled-point overlays."""

import hashlib
import json
import os

import numpy as np
from tabulate import tabulate

from metasampler import geometry
from metasampler.errors import ContractViolation

# Overlay colors per task kind
TASK_COLORS = {
    "classification": "#d62728",
    "reconstruction": "#1f77b4",
    "retrieval": "#2ca02c",
    "pose_regression": "#9467bd",
}
_INPUT_COLOR = "#bbbbbb"


class MetricLog:
    """JSON-lines experiment log, one record per epoch or meta-iteration.

    Records are kept in memory and, when ``path`` is given, appended to the
    file as they are written.
    """

    def __init__(self, path=None, engine="", task="", seed=0, config_hash=""):
        self.path = path
        self.engine = engine
        self.task = task
        self.seed = seed
        self.config_hash = config_hash
        self.records = []
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "w", encoding="utf-8"):
                pass

    def write(self, epoch, losses, metrics=None, wall_ms=0.0, **fields):
        record = {
            "engine": fields.pop("engine", self.engine),
            "task": fields.pop("task", self.task),
            "seed": fields.pop("seed", self.seed),
            "epoch": epoch,
            "losses": {k: float(v) for k, v in losses.items()},
            "metrics": metrics or {},
            "wall_ms": round(float(wall_ms), 3),
            "config_hash": self.config_hash,
        }
        record.update(fields)
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        return record


def read_log(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def log_digest(records):
    """SHA-256 over the records with wall-clock fields removed."""
    h = hashlib.sha256()
    for record in records:
        stripped = {k: v for k, v in record.items() if k != "wall_ms"}
        h.update(json.dumps(stripped, sort_keys=True).encode("utf-8"))
    return h.hexdigest()


def loss_std(records, first=2, last=10, key="total"):
    """Standard deviation of one loss component over epochs ``first..last``."""
    values = [r["losses"][key] for r in records if first <= r["epoch"] <= last]
    if not values:
        return float("nan")
    return float(np.std(values))


def metric_series(records, name, scope="test"):
    """Per-epoch values of ``metrics[scope][name]`` where it was recorded."""
    series = []
    for record in records:
        value = record.get("metrics", {}).get(scope, {}).get(name)
        if value is not None:
            series.append((record["epoch"], value))
    return series


def format_table(rows, headers, floatfmt=".4f"):
    return tabulate(rows, headers=headers, tablefmt="github", floatfmt=floatfmt)


def write_summary(title, sections, output_dir, config=None):
    """Write ``summary.md`` with one tabulated section per entry.

    Args:
        title: Report heading.
        sections: List of ``(heading, headers, rows)`` tuples.
        output_dir: Directory to write into.
        config: Optional ExperimentConfig; its hash is embedded.

    Returns:
        Path to the generated summary.md file.
    """
    os.makedirs(output_dir, exist_ok=True)

    lines = [f"# {title}\n"]
    if config is not None:
        lines.append(f"- **Command**: {config.command}")
        lines.append(f"- **Config hash**: {config.config_hash()}")
        lines.append("")

    for heading, headers, rows in sections:
        lines.append(f"## {heading}\n")
        if rows:
            lines.append(format_table(rows, headers))
        else:
            lines.append("No results.")
        lines.append("")

    path = os.path.join(output_dir, "summary.md")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
    return path


def sample_overlap(first, second, n=None):
    """|first ∩ second| / n for two index subsets of one cloud."""
    first, second = set(int(i) for i in first), set(int(i) for i in second)
    n = n or max(len(first), len(second))
    if n == 0:
        raise ContractViolation("sample_overlap: empty index sets")
    return len(first & second) / n


def _svg_circle(x, y, radius, color):
    return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{radius:.1f}" fill="{color}" />'


def render_svg(cloud, subsets, size=320, margin=16):
    """Orthographic x-y view of a cloud with sampled subsets drawn on top.

    Points are drawn far-to-near by z so nearer points overlap farther ones.
    """
    cloud = geometry.as_cloud(cloud)
    scale = (size - 2 * margin) / 2.0
    to_px = lambda p: (margin + (p[0] + 1.0) * scale, margin + (1.0 - p[1]) * scale)  # noqa: E731

    marks = [(cloud[i, 2], i, _INPUT_COLOR, 2.0) for i in range(len(cloud))]
    for kind, indices in subsets.items():
        color = TASK_COLORS.get(kind, "#000000")
        marks += [(cloud[i, 2], i, color, 4.0) for i in indices]
    marks.sort(key=lambda mark: (mark[0], mark[3]))

    body = [_svg_circle(*to_px(cloud[i]), radius, color) for _, i, color, radius in marks]
    header = f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">'
    return "\n".join([header, f'<rect width="{size}" height="{size}" fill="white" />', *body, "</svg>"]) + "\n"


def export_overlays(cloud, subsets, output_dir, stem):
    """Write the input cloud, one PCB1 file per sampled subset, and an SVG overlay.

    Args:
        cloud: ``(m, 3)`` input cloud.
        subsets: Dict task kind (or sampler name) -> list of indices.
        output_dir: Directory to write into.
        stem: File name prefix, e.g. ``shape-00012``.

    Returns:
        Dict name -> written path (``input``, each subset key, ``svg``).
    """
    os.makedirs(output_dir, exist_ok=True)
    cloud = geometry.as_cloud(cloud)
    paths = {"input": geometry.write_pcb(os.path.join(output_dir, f"{stem}-input.pcb"), cloud)}
    for name, indices in subsets.items():
        paths[name] = geometry.write_pcb(os.path.join(output_dir, f"{stem}-{name}.pcb"), cloud[list(indices)])
    svg_path = os.path.join(output_dir, f"{stem}.svg")
    with open(svg_path, "w", encoding="utf-8") as f:
        f.write(render_svg(cloud, subsets))
    paths["svg"] = svg_path
    return paths
