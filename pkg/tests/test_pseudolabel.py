import csv
import logging

import numpy as np
import pytest

from src.core.exceptions import ContractError, DegenerateInputError
from src.core.manifest import load_manifest, load_sample, with_pseudo_labels
from src.core.pseudolabel import (agreement, cosine_scores, label_manifest, labels_for_sample,
                                  question_scores, select_pseudo_labels)
from src.core.tensor_io import write_tensor


def _oracle(scores, k):
    order = sorted(range(len(scores)), key=lambda t: (-scores[t], t))[:k]
    return tuple(sorted(t + 1 for t in order))


def test_selection_matches_brute_force_sort():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        T = int(rng.integers(1, 20))
        k = int(rng.integers(1, T + 1))
        # 取值粗粒度化以制造并列
        scores = np.round(rng.uniform(-1, 1, T), 1)
        assert select_pseudo_labels(scores, k) == _oracle(list(scores), k)


def test_ties_prefer_earlier_frames():
    assert select_pseudo_labels(np.zeros(6), 3) == (1, 2, 3)


def test_k_out_of_range():
    with pytest.raises(ContractError):
        select_pseudo_labels(np.zeros(4), 5)
    with pytest.raises(ContractError):
        select_pseudo_labels(np.zeros(4), 0)


def test_cosine_scores_are_clipped_and_exact():
    frames = np.array([[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0], [1.0, 1.0]])
    scores = cosine_scores(frames, np.array([2.0, 0.0]))
    np.testing.assert_allclose(scores, [1.0, 0.0, -1.0, np.sqrt(0.5)])
    assert np.all(np.abs(scores) <= 1.0)


def test_zero_frame_reports_its_one_based_index():
    frames = np.ones((4, 3))
    frames[2] = 0.0
    with pytest.raises(DegenerateInputError) as info:
        cosine_scores(frames, np.ones(3))
    assert info.value.frame_index == 3


def test_zero_description_is_degenerate():
    with pytest.raises(DegenerateInputError) as info:
        cosine_scores(np.ones((4, 3)), np.zeros(3))
    assert info.value.frame_index == 0


def test_question_scores_ignore_padded_words():
    frames = np.array([[1.0, 0.0], [0.0, 1.0]])
    question = np.array([[1.0, 0.0], [0.0, 50.0]])
    scores = question_scores(frames, question, np.array([True, False]))
    np.testing.assert_allclose(scores, [1.0, 0.0])


def test_agreement():
    assert agreement((1, 2, 3, 4), (3, 4, 5, 6)) == 0.5
    assert agreement((1,), ()) == 0.0


def test_label_manifest_caches_labels_and_writes_scores(tmp_path, tiny_spec):
    from src.core.synth import generate_dataset

    result = generate_dataset(tiny_spec, str(tmp_path / "d"), show_progress=False)
    score_csv = str(tmp_path / "scores.csv")
    label_manifest(load_manifest(result.train_manifest), 2, score_csv=score_csv, show_progress=False)

    manifest = load_manifest(result.train_manifest)
    for record in manifest:
        sample = load_sample(record)
        expected = select_pseudo_labels(cosine_scores(sample.frames, sample.description), 2)
        assert record.cached_labels(2) == expected

    with open(score_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == tiny_spec.num_train * tiny_spec.num_frames
    assert rows[0]["sample_id"] == "train-00000" and rows[0]["t"] == "1"


def test_stale_cache_is_recomputed_with_warning(tiny_dataset, caplog):
    record = load_manifest(tiny_dataset.train_manifest)[0]
    fresh = labels_for_sample(record, 2)

    stale = with_pseudo_labels(record, (1, 2), 2)
    sample = load_sample(record)
    write_tensor(-sample.description, record.description_path)
    with caplog.at_level(logging.WARNING):
        recomputed = labels_for_sample(stale, 2)
    assert "失效" in caplog.text
    flipped = load_sample(record)
    assert recomputed == select_pseudo_labels(cosine_scores(flipped.frames, flipped.description), 2)
    assert isinstance(fresh, tuple) and len(fresh) == 2


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
@pytest.mark.parametrize("target", ["frames", "description"])
def test_cosine_scores_ignore_positive_scaling(c, target):
    rng = np.random.default_rng(21)
    frames, description = rng.standard_normal((12, 6)), rng.standard_normal(6)
    base = cosine_scores(frames, description)
    if target == "frames":
        scaled = cosine_scores(c * frames, description)
    else:
        scaled = cosine_scores(frames, c * description)
    np.testing.assert_allclose(scaled, base, rtol=1e-12, atol=1e-14)
    assert select_pseudo_labels(scaled, 4) == select_pseudo_labels(base, 4)
