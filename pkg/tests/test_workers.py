import json
import logging
import os

import numpy as np
import pytest

from main import main
from src.core.checkpoint import load_checkpoint
from src.core.exceptions import ConfigurationError, ContractError
from src.core.metrics_log import read_metrics
from src.core.model import GCGModel
from src.core.selection import uniform_indices
from src.workers.eval_worker import ARMS, EVAL_METRICS, EVAL_SUMMARY, SELECTIONS, EvaluateWorker, dump_weights
from src.workers.sweep_worker import SWEEP_FILE, SweepWorker, overrides_for, parse_value
from src.workers.train_worker import EPOCH_LOG, RUN_META, STEP_LOG, SaturationMonitor, TrainWorker


def _train(config, data, out, **kwargs):
    worker = TrainWorker(config, data.train_manifest, str(out), show_progress=False, **kwargs)
    return worker, worker.run()


def _read_bytes(root):
    files = {}
    for folder, _, names in os.walk(root):
        for name in names:
            with open(os.path.join(folder, name), "rb") as fh:
                files[os.path.relpath(os.path.join(folder, name), root)] = fh.read()
    return files


def test_zero_epochs_saves_the_initialisation(tmp_path, tiny_config, tiny_dataset):
    config = tiny_config.with_overrides({"epochs": 0})
    _, checkpoint = _train(config, tiny_dataset, tmp_path / "run")
    restored = GCGModel.from_checkpoint(checkpoint)
    assert restored.store.digest() == GCGModel.create(config).store.digest()
    assert read_metrics(str(tmp_path / "run" / STEP_LOG)) == []


def test_training_writes_logs_and_metrics(tmp_path, tiny_config, tiny_dataset):
    worker, checkpoint = _train(tiny_config, tiny_dataset, tmp_path / "run",
                                eval_manifest_path=tiny_dataset.test_manifest)
    steps = read_metrics(str(tmp_path / "run" / STEP_LOG))
    assert [row["step"] for row in steps] == ["1", "2"]
    assert all(np.isfinite(float(row["total"])) for row in steps)

    epochs = read_metrics(str(tmp_path / "run" / EPOCH_LOG))
    assert [row["split"] for row in epochs] == ["train", "test"]
    # 训练路径不读取真实标注
    assert all(row["recall"] == "" for row in epochs)
    assert [m.split for m in worker.history] == ["train", "test"]

    with open(tmp_path / "run" / RUN_META, encoding="utf-8") as fh:
        meta = json.load(fh)
    assert meta["train_samples"] == 8 and meta["eval_samples"] == 4
    assert load_checkpoint(checkpoint).step == 2


def test_callbacks_fire_per_step_and_epoch(tmp_path, tiny_config, tiny_dataset):
    worker = TrainWorker(tiny_config, tiny_dataset.train_manifest, str(tmp_path / "run"), show_progress=False)
    seen = []
    worker.register_callback("step_finished", lambda step, losses: seen.append(("step", step)))
    worker.register_callback("epoch_finished", lambda m: seen.append(("epoch", m.epoch)))
    worker.run()
    assert seen == [("step", 1), ("step", 2), ("epoch", 1)]



def test_saturation_monitor_warns_on_pinned_centers(caplog):
    monitor = SaturationMonitor()
    with caplog.at_level(logging.WARNING):
        monitor.observe(np.array([1e-6, 0.9999999, 0.5, 1.0]), grounder_grad_norm=0.3)
        assert monitor.fraction == 0.75
        assert monitor.check(epoch=3)
    assert "饱和" in caplog.text
    # 检查后计数清零
    assert monitor.fraction == 0.0 and not monitor.check(epoch=4)


def test_saturation_monitor_warns_on_vanishing_gradients(caplog):
    monitor = SaturationMonitor()
    with caplog.at_level(logging.WARNING):
        monitor.observe(np.array([0.3, 0.6]), grounder_grad_norm=0.0)
        assert monitor.check(epoch=1)
    assert "梯度" in caplog.text


def test_saturation_monitor_is_quiet_for_healthy_centers(caplog):
    monitor = SaturationMonitor()
    with caplog.at_level(logging.WARNING):
        for mu in ([0.2, 0.7], [0.1, 0.95], [0.4, 0.5]):
            monitor.observe(np.array(mu), grounder_grad_norm=1e-2)
        assert not monitor.check(epoch=1)
    assert "饱和" not in caplog.text


def test_training_reports_saturated_centers(tmp_path, tiny_config, tiny_dataset, caplog, monkeypatch):
    original = GCGModel.create

    def pinned(config, seed=None):
        model = original(config, seed)
        # 中心头偏置推到 sigmoid 的平坦区
        model.grounder.head_bias.data = np.full_like(model.grounder.head_bias.data, 40.0)
        return model

    monkeypatch.setattr(GCGModel, "create", pinned)
    worker = TrainWorker(tiny_config, tiny_dataset.train_manifest, str(tmp_path / "run"), show_progress=False)
    saturated = []
    worker.register_callback("centers_saturated", lambda epoch, fraction: saturated.append((epoch, fraction)))
    with caplog.at_level(logging.WARNING):
        worker.run()
    assert saturated == [(1, 1.0)]
    assert "饱和" in caplog.text

def test_same_seed_gives_identical_runs(tmp_path, tiny_config, tiny_dataset):
    _train(tiny_config, tiny_dataset, tmp_path / "a")
    _train(tiny_config, tiny_dataset, tmp_path / "b")
    for name in (STEP_LOG, EPOCH_LOG):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert _read_bytes(str(tmp_path / "a" / "checkpoint")) == _read_bytes(str(tmp_path / "b" / "checkpoint"))


def test_resuming_matches_an_uninterrupted_run(tmp_path, tiny_config, tiny_dataset):
    two = tiny_config.with_overrides({"epochs": 2})
    _, straight = _train(two, tiny_dataset, tmp_path / "straight")
    _, first = _train(tiny_config, tiny_dataset, tmp_path / "first")
    _, resumed = _train(two, tiny_dataset, tmp_path / "resumed", resume_from=first)
    assert GCGModel.from_checkpoint(resumed).store.digest() == GCGModel.from_checkpoint(straight).store.digest()


def test_single_sample_batches_cannot_mine_inter_negatives(tmp_path, tiny_config, tiny_dataset):
    config = tiny_config.with_overrides({"batch_size": 1})
    with pytest.raises(ConfigurationError):
        _train(config, tiny_dataset, tmp_path / "run")


def test_manifest_must_match_config(tmp_path, tiny_config, tiny_dataset):
    config = tiny_config.with_overrides({"T": 16})
    with pytest.raises(ConfigurationError):
        _train(config, tiny_dataset, tmp_path / "run")


def test_evaluation_reports_every_arm(tmp_path, tiny_config, tiny_dataset):
    _, checkpoint = _train(tiny_config, tiny_dataset, tmp_path / "run")
    before = _read_bytes(checkpoint)
    out = tmp_path / "eval"
    metrics = EvaluateWorker(checkpoint, tiny_dataset.test_manifest, str(out),
                             ground_truth_path=tiny_dataset.ground_truth, show_progress=False).run()
    assert _read_bytes(checkpoint) == before

    assert set(metrics) == set(ARMS)
    for m in metrics.values():
        assert m.samples == 4
        assert 0.0 <= m.recall <= 1.0 and 0.0 <= m.accuracy <= 1.0
    assert metrics["pseudo_label"].pseudo_label_agreement == 1.0
    assert metrics["gcg"].center_error is not None

    selections = read_metrics(str(out / SELECTIONS))
    uniform = {row["selected"] for row in selections if row["arm"] == "uniform"}
    assert uniform == {" ".join(str(t) for t in uniform_indices(8, 2))}
    assert [row["arm"] for row in read_metrics(str(out / EVAL_METRICS))] == list(ARMS)
    with open(out / EVAL_SUMMARY, encoding="utf-8") as fh:
        assert json.load(fh)["ground_truth"] is True


def test_evaluation_without_ground_truth(tmp_path, tiny_config, tiny_dataset, caplog):
    _, checkpoint = _train(tiny_config.with_overrides({"epochs": 0}), tiny_dataset, tmp_path / "run")
    with caplog.at_level(logging.WARNING):
        metrics = EvaluateWorker(checkpoint, tiny_dataset.test_manifest, str(tmp_path / "eval"),
                                 show_progress=False).run()
    assert "真实标注" in caplog.text
    assert all(m.recall is None and m.center_error is None for m in metrics.values())


def test_evaluation_with_single_sample_batches(tmp_path, tiny_config, tiny_dataset, caplog):
    config = tiny_config.with_overrides({"epochs": 0, "batch_size": 1})
    _, checkpoint = _train(config, tiny_dataset, tmp_path / "run")
    with caplog.at_level(logging.WARNING):
        metrics = EvaluateWorker(checkpoint, tiny_dataset.test_manifest, str(tmp_path / "eval"),
                                 ground_truth_path=tiny_dataset.ground_truth, show_progress=False).run()
    assert "跨视频" in caplog.text
    assert metrics["gcg"].samples == 4


def test_evaluation_of_empty_manifest_fails(tmp_path, tiny_config, tiny_dataset):
    _, checkpoint = _train(tiny_config.with_overrides({"epochs": 0}), tiny_dataset, tmp_path / "run")
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"version": 1, "T": 8, "D_I": 8, "C": 3, "samples": []}))
    with pytest.raises(ContractError):
        EvaluateWorker(checkpoint, str(empty), str(tmp_path / "eval"), show_progress=False).run()


def test_dump_weights(tmp_path, tiny_config, tiny_dataset):
    _, checkpoint = _train(tiny_config.with_overrides({"epochs": 0}), tiny_dataset, tmp_path / "run")
    out = dump_weights(checkpoint, tiny_dataset.test_manifest, str(tmp_path / "weights.csv"), show_progress=False)
    rows = read_metrics(out)
    assert len(rows) == 4 * 8
    assert list(rows[0]) == ["sample_id", "t", "g_1", "g_2", "p_t"]
    p = np.array([float(row["p_t"]) for row in rows])
    assert p.min() >= 0.0 and p.max() <= 1.0


def test_sweep_values_are_parsed_per_axis(tiny_config):
    assert parse_value("T", "16") == 16
    assert parse_value("sigma", "0.1") == 0.1
    with pytest.raises(ContractError):
        parse_value("K", "2.5")
    with pytest.raises(ContractError):
        parse_value("sigma", "wide")
    with pytest.raises(ContractError):
        parse_value("objective", "everything")
    assert overrides_for("objective", "vqa", tiny_config) == {"alpha1": 0.0, "alpha2": 0.0}
    assert overrides_for("objective", "vqa+con", tiny_config) == {"alpha1": 0.0, "alpha2": tiny_config.alpha_con}


def test_sweep_skips_invalid_values(tmp_path, tiny_config, tiny_spec):
    worker = SweepWorker(tiny_config, tiny_spec, "N_intra", ["0", "2", "99"], [0], str(tmp_path),
                         show_progress=False)
    skipped = []
    worker.register_callback("value_skipped", lambda value, reason: skipped.append(value))
    rows = worker.run()
    assert [row["value"] for row in rows] == ["0", "2"]
    assert skipped == ["99"]
    table = read_metrics(str(tmp_path / SWEEP_FILE))
    assert len(table) == 2
    assert all(0.0 <= float(row["recall"]) <= 1.0 for row in table)


def test_sweep_over_objectives(tmp_path, tiny_config, tiny_spec):
    rows = SweepWorker(tiny_config, tiny_spec, "objective", ["vqa", "full"], [0, 1], str(tmp_path),
                       show_progress=False).run()
    assert [(row["value"], row["seed"]) for row in rows] == [("vqa", 0), ("vqa", 1), ("full", 0), ("full", 1)]


def test_cli_end_to_end(tmp_path, tiny_spec):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(tiny_spec.to_json_dict()))
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"T": 8, "K": 2, "D_I": 8, "D_G": 16, "N": 1, "N_intra": 2,
                                  "N_inter": 2, "batch_size": 4, "epochs": 1, "n_p": 20, "lr": 1e-3}))
    data, run = tmp_path / "data", tmp_path / "run"

    assert main(["synth", "--spec", str(spec), "--out", str(data), "--quiet"]) == 0
    train_manifest = str(data / "train_manifest.json")
    test_manifest = str(data / "test_manifest.json")
    assert main(["pseudolabel", "--manifest", train_manifest, "--k", "2", "--quiet"]) == 0
    assert main(["pseudolabel", "--manifest", test_manifest, "--config", str(config), "--quiet"]) == 0
    assert main(["train", "--config", str(config), "--manifest", train_manifest, "--out", str(run), "--quiet"]) == 0
    checkpoint = str(run / "checkpoint")
    assert main(["evaluate", "--checkpoint", checkpoint, "--manifest", test_manifest, "--out", str(run / "eval"),
                 "--ground-truth", str(data / "ground_truth.json"), "--quiet"]) == 0
    assert main(["dump-weights", "--checkpoint", checkpoint, "--manifest", test_manifest,
                 "--out", str(run / "w.csv"), "--quiet"]) == 0


def test_cli_reports_failures(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"K": 64}))
    assert main(["train", "--config", str(bad), "--manifest", str(tmp_path / "m.json"),
                 "--out", str(tmp_path / "run"), "--quiet"]) == 1
    assert main(["evaluate", "--checkpoint", str(tmp_path / "none"), "--manifest", str(tmp_path / "m.json"),
                 "--out", str(tmp_path / "eval"), "--quiet"]) == 1
