import json
import os

import numpy as np
import pytest

from src.core.exceptions import SpecError
from src.core.manifest import load_manifest, load_sample
from src.core.synth import (GroundTruth, SynthSpec, center_error, generate_dataset, keyframe_recall,
                            load_ground_truth, oracle_metrics)


def _tree(root):
    files = {}
    for folder, _, names in os.walk(root):
        for name in names:
            path = os.path.join(folder, name)
            with open(path, "rb") as fh:
                files[os.path.relpath(path, root)] = fh.read()
    return files


def test_same_spec_gives_identical_bytes(tmp_path, tiny_spec):
    generate_dataset(tiny_spec, str(tmp_path / "a"), show_progress=False)
    generate_dataset(tiny_spec, str(tmp_path / "b"), show_progress=False)
    a, b = _tree(str(tmp_path / "a")), _tree(str(tmp_path / "b"))
    assert a.keys() == b.keys()
    assert all(a[name] == b[name] for name in a)


def test_different_seed_gives_different_data(tmp_path, tiny_spec):
    other = SynthSpec.from_dict(dict(tiny_spec.to_json_dict(), seed=1))
    generate_dataset(tiny_spec, str(tmp_path / "a"), show_progress=False)
    generate_dataset(other, str(tmp_path / "b"), show_progress=False)
    name = os.path.join("tensors", "train-00000_frames.gcgt")
    assert _tree(str(tmp_path / "a"))[name] != _tree(str(tmp_path / "b"))[name]


def test_manifests_carry_no_ground_truth(tmp_path, tiny_spec):
    result = generate_dataset(tiny_spec, str(tmp_path), show_progress=False)
    for path in (result.train_manifest, result.test_manifest):
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        assert "timestamps" not in text
    truth = load_ground_truth(result.ground_truth)
    assert len(truth) == tiny_spec.num_train + tiny_spec.num_test


def test_generated_samples_follow_the_spec(tmp_path, tiny_spec):
    result = generate_dataset(tiny_spec, str(tmp_path), show_progress=False)
    truth = load_ground_truth(result.ground_truth)
    manifest = load_manifest(result.train_manifest)
    assert len(manifest) == tiny_spec.num_train
    planted_cos, other_cos = [], []
    for record in manifest:
        sample = load_sample(record)
        gt = truth[record.sample_id]
        assert sample.frames.shape == (tiny_spec.num_frames, tiny_spec.input_dim)
        assert sample.question.shape == (tiny_spec.question_len, tiny_spec.input_dim)
        assert sample.candidates.shape == (tiny_spec.num_candidates, tiny_spec.input_dim)
        assert gt.answer == record.answer
        assert len(gt.timestamps) == tiny_spec.num_planted
        assert list(gt.timestamps) == sorted(set(gt.timestamps))
        assert 1 <= gt.timestamps[0] and gt.timestamps[-1] <= tiny_spec.num_frames
        assert np.linalg.norm(sample.description) == pytest.approx(1.0, abs=1e-5)

        answer = sample.candidates[gt.answer]
        for t in range(1, tiny_spec.num_frames + 1):
            cos = float(sample.frames[t - 1] @ answer)
            (planted_cos if t in gt.timestamps else other_cos).append(cos)
        gram = sample.candidates @ sample.candidates.T
        assert np.all(gram[~np.eye(tiny_spec.num_candidates, dtype=bool)] < 0.3 + 1e-6)
    assert np.mean(planted_cos) > 0.8
    assert np.mean(other_cos) < 0.5


def test_spec_json_round_trip(tmp_path, tiny_spec):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(tiny_spec.to_json_dict()))
    assert SynthSpec.from_json(str(path)) == tiny_spec
    assert SynthSpec.from_json(None) == SynthSpec()


@pytest.mark.parametrize("raw", [{"colour": 1}, {"T": 4, "K_star": 5}, {"C": 1}, {"eta": -0.1}])
def test_invalid_specs(raw):
    with pytest.raises(SpecError):
        SynthSpec.from_dict(raw)


def test_spec_file_errors(tmp_path):
    with pytest.raises(SpecError):
        SynthSpec.from_json(str(tmp_path / "none.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(SpecError):
        SynthSpec.from_json(str(bad))


def test_impossible_candidate_set_is_reported(tmp_path):
    spec = SynthSpec.from_dict({"D_I": 2, "T": 4, "K_star": 1, "C": 20, "prototypes": 1,
                                "train": 1, "test": 0})
    with pytest.raises(SpecError):
        generate_dataset(spec, str(tmp_path), show_progress=False)


def test_keyframe_recall():
    assert keyframe_recall((1, 2, 3, 4), (3, 4, 9, 10)) == 0.5
    assert keyframe_recall((1, 2), (1, 5, 7, 9)) == 0.5
    assert keyframe_recall((1, 2), (1, 2, 7, 9)) == 1.0
    # K > K*：只按真实关键帧计数
    assert keyframe_recall((1, 2, 3, 4, 5, 6), (2, 5)) == 1.0
    assert keyframe_recall((1, 2, 3, 4, 5, 6), (2, 9)) == 0.5
    assert keyframe_recall((), (1,)) == 0.0


def test_center_error():
    assert center_error([0.5], (4, 8), 8) == pytest.approx(0.0)
    assert center_error([0.25, 1.0], (4,), 8) == pytest.approx((0.25 + 0.5) / 2)


def test_oracle_metrics_with_and_without_truth():
    logits = np.array([0.1, 2.0, 2.0])
    without = oracle_metrics((1, 2), None, logits, 1)
    assert without.correct and without.recall is None and without.center_error is None

    truth = GroundTruth(timestamps=(2, 3), answer=2)
    scored = oracle_metrics((1, 2), truth, logits, 2, mu=[0.5], num_frames=4)
    assert not scored.correct
    assert scored.recall == 0.5
    assert scored.center_error == pytest.approx(0.0)


def test_noiseless_pseudo_labels_equal_planted_frames(tmp_path, tiny_spec):
    from src.core.pseudolabel import labels_for_sample

    spec = SynthSpec.from_dict(dict(tiny_spec.to_json_dict(), eta=0.0))
    result = generate_dataset(spec, str(tmp_path), show_progress=False)
    truth = load_ground_truth(result.ground_truth)
    for path in (result.train_manifest, result.test_manifest):
        for record in load_manifest(path):
            assert labels_for_sample(record, spec.num_planted) == truth[record.sample_id].timestamps


@pytest.mark.slow
def test_uniform_baseline_recall_matches_expectation(tmp_path):
    from src.core.selection import uniform_indices

    spec = SynthSpec.from_dict({"T": 32, "K_star": 4, "C": 5, "D_I": 32, "eta": 0.5, "train": 0, "test": 500})
    result = generate_dataset(spec, str(tmp_path), show_progress=False)
    truth = load_ground_truth(result.ground_truth)
    selected = uniform_indices(32, 4)
    recall = np.mean([keyframe_recall(selected, gt.timestamps) for gt in truth.values()])
    assert recall == pytest.approx(0.125, abs=0.05)
