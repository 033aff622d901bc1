"""End-to-end tests for the metasampler CLI on a tiny dataset."""

import hashlib
import json
import os
import tempfile
from unittest.mock import patch

import numpy as np
from click.testing import CliRunner

from metasampler import data, geometry, models, reports
from metasampler import tensor as T
from metasampler.cli import main
from metasampler.errors import EXIT_INPUT, EXIT_NUMERICAL, EXIT_PROTOCOL

TINY = ["gen-data", "--m", "16", "--train-per-class", "2", "--val-per-class", "1", "--test-per-class", "1"]


def _invoke(root, *args):
    return CliRunner().invoke(main, ["--out", root, *args])


def _seed_pools(root, kinds, first_seed=0, dataset="", suffix=""):
    """Write small untrained, frozen pools as if pretrain had produced them."""
    for offset, kind in enumerate(kinds):
        seed = first_seed + 10 * offset
        train = [models.init_task_model(kind, seed + i, m=16, dataset=dataset).freeze() for i in range(2)]
        test = [models.init_task_model(kind, seed + 5, m=16, dataset=dataset).freeze()]
        models.save_pool(models.ModelPool(kind, train, test), os.path.join(root, "pools", f"{kind}-mini{suffix}"))


def _spec_hash(root, shift=False):
    return data.load_dataset(os.path.join(root, "data-shift" if shift else "data")).spec.spec_hash()


def _tree_digest(directory):
    h = hashlib.sha256()
    for base, dirs, files in sorted(os.walk(directory)):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(base, name)
            h.update(os.path.relpath(path, directory).encode("utf-8"))
            with open(path, "rb") as f:
                h.update(f.read())
    return h.hexdigest()


def test_gen_data_and_status():
    with tempfile.TemporaryDirectory() as root:
        result = _invoke(root, *TINY)
        assert result.exit_code == 0, result.output
        assert "train: 16 clouds" in result.output
        assert os.path.exists(os.path.join(root, "data", "index.json"))
        assert os.path.exists(os.path.join(root, "data", "config.json"))

        status = _invoke(root, "status")
        assert status.exit_code == 0
        assert "Dataset data: 32 clouds" in status.output
        assert "Dataset data-shift: missing" in status.output
        assert "Pools: none" in status.output


def test_missing_dataset_is_an_input_error():
    with tempfile.TemporaryDirectory() as root:
        result = _invoke(root, "pretrain", "--task", "classification")
        assert result.exit_code == EXIT_INPUT
        assert "run gen-data first" in result.output


def test_pretraining_failure_exit_code():
    with tempfile.TemporaryDirectory() as root:
        _invoke(root, *TINY)
        result = _invoke(root, "pretrain", "--task", "classification", "--count", "1", "--max-epochs", "1")
        assert result.exit_code == EXIT_NUMERICAL
        assert "missed its bar" in result.output


def test_baseline_evaluation_writes_results():
    with tempfile.TemporaryDirectory() as root:
        _invoke(root, *TINY)
        _seed_pools(root, ["classification"])
        result = _invoke(root, "eval", "--task", "classification", "--sampler", "fps", "--ratio", "1",
                         "--ratio", "4", "--eval-size", "4")
        assert result.exit_code == 0, result.output
        out = os.path.join(root, "eval", "classification-fps-matched-s0")
        with open(os.path.join(out, "results.json"), "r", encoding="utf-8") as f:
            results = json.load(f)["results"]
        assert [r["n"] for r in results] == [16, 4]
        assert os.path.exists(os.path.join(out, "summary.md"))


def test_train_eval_and_export_a_joint_sampler():
    with tempfile.TemporaryDirectory() as root:
        _invoke(root, *TINY)
        _seed_pools(root, ["classification"])
        trained = _invoke(root, "train-sampler", "--task", "classification", "--k", "2", "--ratio", "4",
                          "--epochs", "1", "--batch-size", "8")
        assert trained.exit_code == 0, trained.output
        run = os.path.join(root, "samplers", "joint-classification-k2", "r4-s0")
        assert os.path.exists(os.path.join(run, "sampler.ckpt"))
        assert os.path.exists(os.path.join(run, "log.jsonl"))

        evaluated = _invoke(root, "eval", "--task", "classification", "--sampler", "joint-classification-k2",
                            "--ratio", "4", "--eval-size", "4")
        assert evaluated.exit_code == 0, evaluated.output

        exported = _invoke(root, "export", "--sampler", "classification=joint-classification-k2",
                           "--sampler", "again=joint-classification-k2", "--ratio", "4", "--shapes", "2",
                           "--compare", "classification,again")
        assert exported.exit_code == 0, exported.output
        out = os.path.join(root, "export", "r4-s0")
        assert os.path.exists(os.path.join(out, "shape-00001.svg"))
        with open(os.path.join(out, "overlap.json"), "r", encoding="utf-8") as f:
            overlap = json.load(f)
        assert overlap["mean"] == 1.0
        assert overlap["fraction_below_one"] == 0.0


def test_train_sampler_rejects_oversized_k():
    with tempfile.TemporaryDirectory() as root:
        _invoke(root, *TINY)
        _seed_pools(root, ["retrieval"])
        result = _invoke(root, "train-sampler", "--task", "retrieval", "--k", "5")
        assert result.exit_code == EXIT_INPUT


def test_meta_train_then_adapt():
    with tempfile.TemporaryDirectory() as root:
        _invoke(root, *TINY)
        _seed_pools(root, ["classification", "reconstruction", "pose_regression"])
        meta = _invoke(root, "meta-train", "--tasks", "classification,reconstruction", "--k", "1", "--ratio", "4",
                       "--iterations", "1", "--inner-steps", "1", "--batch-size", "2")
        assert meta.exit_code == 0, meta.output
        ckpt = models.load_checkpoint(os.path.join(root, "samplers", "meta", "r4-s0", "sampler.ckpt"))
        assert ckpt.meta["meta_uids"] == ["classification:mini:0", "reconstruction:mini:10"]

        adapted = _invoke(root, "adapt", "--task", "pose_regression", "--ratio", "4", "--epochs", "1")
        assert adapted.exit_code == 0, adapted.output
        assert os.path.exists(os.path.join(root, "samplers", "adapt-pose_regression-meta", "r4-s0", "log.jsonl"))

        scratch = _invoke(root, "adapt", "--task", "pose_regression", "--init", "scratch", "--ratio", "4",
                          "--epochs", "1")
        assert scratch.exit_code == 0, scratch.output

        overlap = _invoke(root, "adapt", "--task", "classification", "--ratio", "4", "--epochs", "1")
        assert overlap.exit_code == EXIT_PROTOCOL
        assert "overlap" in overlap.output
        assert "pretrain --task classification --seed 100 --name classification-adapt" in overlap.output
        assert not os.path.exists(os.path.join(root, "samplers", "adapt-classification-meta"))


def test_adapt_on_shifted_pool_after_default_meta_train():
    with tempfile.TemporaryDirectory() as root:
        _invoke(root, *TINY)
        _invoke(root, *TINY, "--shift")
        _seed_pools(root, ["classification", "reconstruction"], dataset=_spec_hash(root))
        _seed_pools(root, ["classification"], dataset=_spec_hash(root, shift=True), suffix="-shift")
        meta = _invoke(root, "meta-train", "--tasks", "classification,reconstruction", "--k", "1", "--ratio", "4",
                       "--iterations", "1", "--inner-steps", "1", "--batch-size", "2")
        assert meta.exit_code == 0, meta.output

        adapted = _invoke(root, "adapt", "--task", "classification", "--shift", "--ratio", "4", "--epochs", "1")
        assert adapted.exit_code == 0, adapted.output
        assert os.path.exists(os.path.join(root, "samplers", "adapt-classification-meta-shift", "r4-s0",
                                           "sampler.ckpt"))


def test_pretrain_rejects_unknown_classification_loss():
    with tempfile.TemporaryDirectory() as root:
        _invoke(root, *TINY)
        result = _invoke(root, "pretrain", "--task", "classification", "--loss", "hinge")
        assert result.exit_code == 2
        assert "hinge" in result.output


def test_gen_data_is_reproducible_across_roots():
    with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
        assert _invoke(first, *TINY, "--seed", "7").exit_code == 0
        assert _invoke(second, *TINY, "--seed", "7").exit_code == 0
        assert _tree_digest(os.path.join(first, "data")) == _tree_digest(os.path.join(second, "data"))

        assert _invoke(second, *TINY, "--seed", "8").exit_code == 0
        assert _tree_digest(os.path.join(first, "data")) != _tree_digest(os.path.join(second, "data"))


def test_identical_flags_give_identical_log_digest():
    with tempfile.TemporaryDirectory() as root:
        _invoke(root, *TINY)
        _seed_pools(root, ["classification"])
        digests = []
        for name in ("first", "second"):
            result = _invoke(root, "train-sampler", "--task", "classification", "--k", "2", "--ratio", "4",
                             "--epochs", "2", "--batch-size", "8", "--name", name)
            assert result.exit_code == 0, result.output
            records = reports.read_log(os.path.join(root, "samplers", name, "r4-s0", "log.jsonl"))
            assert len(records) == 2
            digests.append(reports.log_digest(records))
        assert digests[0] == digests[1]


def test_non_finite_loss_aborts_with_diagnostics():
    with tempfile.TemporaryDirectory() as root:
        _invoke(root, *TINY)
        _seed_pools(root, ["classification"])
        with patch("metasampler.losses.batch_simplification", return_value=T.Tensor(np.nan)):
            result = _invoke(root, "train-sampler", "--task", "classification", "--k", "2", "--ratio", "4",
                             "--epochs", "1", "--batch-size", "8")
        assert result.exit_code == EXIT_NUMERICAL
        assert "non-finite loss" in result.output
        assert '"components"' in result.output
        assert '"epoch": 1' in result.output


def test_convert_round_trip():
    cloud = np.array([[0.5, 1.0, -1.0], [0.25, 0.0, 2.0], [1.0, 1.0, 1.0]])
    with tempfile.TemporaryDirectory() as root:
        source = os.path.join(root, "cloud.xyz")
        geometry.write_xyz(source, cloud)
        runner = CliRunner()
        first = runner.invoke(main, ["convert", source, os.path.join(root, "cloud.pcb")])
        assert first.exit_code == 0, first.output
        second = runner.invoke(main, ["convert", os.path.join(root, "cloud.pcb"), os.path.join(root, "back.xyz")])
        assert second.exit_code == 0
        assert np.allclose(geometry.read_xyz(os.path.join(root, "back.xyz")), cloud)

        missing = runner.invoke(main, ["convert", os.path.join(root, "nope.xyz"), os.path.join(root, "x.pcb")])
        assert missing.exit_code == EXIT_INPUT
