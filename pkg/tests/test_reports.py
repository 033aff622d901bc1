"""Tests for metric logs, summaries and overlays."""

import os
import tempfile

import numpy as np
import pytest

from metasampler import geometry
from metasampler.config import ExperimentConfig
from metasampler.errors import ContractViolation
from metasampler.reports import (
    MetricLog,
    export_overlays,
    format_table,
    log_digest,
    loss_std,
    metric_series,
    read_log,
    render_svg,
    sample_overlap,
    write_summary,
)


def _records(totals, wall=0.0):
    log = MetricLog(engine="joint", task="classification", seed=1, config_hash="abc")
    for epoch, total in enumerate(totals, start=1):
        log.write(epoch, {"total": total}, {"test": {"accuracy": total / 10.0}}, wall_ms=wall)
    return log.records


def test_metric_log_writes_json_lines():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "run", "log.jsonl")
        log = MetricLog(path, engine="meta", task="classification+retrieval", seed=3, config_hash="f00")
        log.write(1, {"task": 2.5, "total": 3.0}, {"temperature": 0.9}, wall_ms=12.34567)
        log.write(2, {"task": 2.0, "total": 2.4}, engine="adapt")
        records = read_log(path)

    assert records == log.records
    assert records[0]["engine"] == "meta"
    assert records[0]["wall_ms"] == 12.346
    assert records[0]["config_hash"] == "f00"
    assert records[1]["engine"] == "adapt"
    assert records[1]["metrics"] == {}


def test_log_digest_ignores_wall_clock():
    assert log_digest(_records([3.0, 2.0], wall=1.0)) == log_digest(_records([3.0, 2.0], wall=99.0))
    assert log_digest(_records([3.0, 2.0])) != log_digest(_records([3.0, 2.5]))


def test_loss_std_window():
    records = _records([10.0, 1.0, 2.0, 3.0, 100.0])
    assert loss_std(records, first=2, last=4) == pytest.approx(np.std([1.0, 2.0, 3.0]))
    assert np.isnan(loss_std(records, first=20, last=30))


def test_metric_series():
    records = _records([5.0, 4.0])
    assert metric_series(records, "accuracy") == [(1, 0.5), (2, 0.4)]
    assert metric_series(records, "accuracy", scope="train") == []


def test_format_table_uses_github_style():
    table = format_table([["fps", 0.123456]], ["Sampler", "Accuracy"])
    assert table.splitlines()[0].startswith("| Sampler")
    assert "0.1235" in table


def test_write_summary():
    config = ExperimentConfig(command="eval")
    with tempfile.TemporaryDirectory() as tmpdir:
        path = write_summary("Evaluation", [("Results", ["Ratio", "Accuracy"], [[8, 0.75]]), ("Empty", ["A"], [])],
                             tmpdir, config)
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    assert text.startswith("# Evaluation")
    assert config.config_hash() in text
    assert "## Results" in text and "0.7500" in text
    assert "No results." in text


def test_sample_overlap():
    assert sample_overlap([1, 2, 3, 4], [3, 4, 5, 6]) == 0.5
    assert sample_overlap([1, 2], [1, 2], n=2) == 1.0
    with pytest.raises(ContractViolation):
        sample_overlap([], [])


def test_render_svg_draws_every_point():
    cloud = geometry.normalize(np.random.default_rng(0).normal(size=(10, 3)))
    svg = render_svg(cloud, {"classification": [0, 1], "custom": [2]})
    assert svg.startswith("<svg")
    assert svg.count("<circle") == 13
    assert "#d62728" in svg and "#000000" in svg


def test_export_overlays_writes_subsets():
    cloud = geometry.normalize(np.random.default_rng(1).normal(size=(12, 3)))
    with tempfile.TemporaryDirectory() as tmpdir:
        paths = export_overlays(cloud, {"retrieval": [0, 5, 7]}, tmpdir, "shape-00000")
        assert set(paths) == {"input", "retrieval", "svg"}
        subset = geometry.read_pcb(paths["retrieval"])
        assert np.allclose(subset, cloud[[0, 5, 7]], atol=1e-6)
        assert os.path.exists(paths["svg"])
