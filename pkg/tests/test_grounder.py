import math

import numpy as np
import pytest

from src.core import numerics as nx
from src.core.exceptions import CapacityError, ContractError
from src.core.grounder import (GaussianGenerator, GrounderParams, combine_masks, frame_positions,
                               gaussian_masks, nearest_frames, pool_and_predict_centers, sinusoidal_table)
from src.core.model import GCGModel
from src.core.numerics import ComputationRecord, Tensor
from src.core.optimizer import ParamStore


def _generator(config, seed=0):
    config = config.with_overrides({"precision": "float64"})
    store = ParamStore(np.dtype(np.float64))
    params = GrounderParams.create(store, config, np.random.default_rng(seed))
    return GaussianGenerator(params, config.sigma), store


def _inputs(config, seed=1, L_q=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((config.num_frames, config.input_dim)), rng.standard_normal((L_q, config.input_dim))


def test_gaussian_peak_value(float64):
    masks = gaussian_masks(Tensor(np.array([0.5])), 0.2, 2)
    assert masks.g.data[0, 0] == pytest.approx(1.0 / (math.sqrt(2 * math.pi) * 0.2), abs=1e-12)
    assert masks.g.data[0, 0] == pytest.approx(1.994711, abs=1e-5)


def test_masks_are_evaluated_at_one_based_positions(float64):
    np.testing.assert_allclose(frame_positions(4, np.float64), [0.25, 0.5, 0.75, 1.0])
    masks = gaussian_masks(Tensor(np.array([0.25, 1.0])), 0.1, 4)
    assert masks.g.shape == (2, 4)
    assert np.argmax(masks.g.data[0]) == 0 and np.argmax(masks.g.data[1]) == 3


def test_combined_weights_span_zero_to_one(float64):
    p = combine_masks(gaussian_masks(Tensor(np.array([0.2, 0.7])), 0.2, 16)).data
    assert p.min() == 0.0 and p.max() == 1.0


def test_flat_weights_fall_back_to_one_half(float64):
    p = combine_masks(gaussian_masks(Tensor(np.array([0.3, 0.6])), 0.2, 1)).data
    np.testing.assert_array_equal(p, [0.5])


def test_sigma_must_be_positive(float64):
    with pytest.raises(ContractError):
        gaussian_masks(Tensor(np.array([0.5])), 0.0, 8)


def test_forward_shapes(float64, tiny_config):
    generator, _ = _generator(tiny_config)
    frames, question = _inputs(tiny_config)
    out = generator(frames, question)
    assert out.encoded.shape == (tiny_config.num_frames, tiny_config.hidden_dim)
    assert out.mu.shape == (tiny_config.num_select,)
    assert out.p.shape == (tiny_config.num_frames,)
    assert np.all((out.mu.data > 0) & (out.mu.data < 1))


def test_initial_centers_are_spread_over_the_video(float64, tiny_config):
    generator, _ = _generator(tiny_config)
    frames, question = _inputs(tiny_config)
    mu = generator(frames, question).mu.data
    K = tiny_config.num_select
    np.testing.assert_allclose(mu, (np.arange(K) + 0.5) / K, atol=0.1)


def test_padded_question_words_do_not_matter(float64, tiny_config):
    generator, _ = _generator(tiny_config)
    frames, question = _inputs(tiny_config, L_q=4)
    mask = np.array([True, True, False, False])
    altered = question.copy()
    altered[2:] = 100.0
    a = generator(frames, question, mask).p.data
    b = generator(frames, altered, mask).p.data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_too_many_frames_exceed_position_table(float64, tiny_config):
    generator, _ = _generator(tiny_config)
    with pytest.raises(CapacityError):
        generator(np.ones((65, tiny_config.input_dim)), np.ones((2, tiny_config.input_dim)))


def test_gradient_reaches_every_grounder_parameter(float64, tiny_config):
    generator, store = _generator(tiny_config)
    frames, question = _inputs(tiny_config)
    weights = np.linspace(-1.0, 1.0, tiny_config.num_frames)
    with ComputationRecord() as record:
        out = generator(frames, question)
        loss = nx.add(nx.reduce_sum(nx.mul(out.p, weights)), nx.reduce_sum(out.mu))
        nx.backward(loss, record)
    missing = [name for name, param in store if param.grad is None]
    assert missing == []


def test_same_seed_same_parameters(tiny_config):
    _, a = _generator(tiny_config, seed=5)
    _, b = _generator(tiny_config, seed=5)
    assert a.digest() == b.digest()


def test_nearest_frames():
    assert nearest_frames([0.5, 1.0, 0.01], 8) == [4, 8, 1]


def test_sinusoidal_table():
    table = sinusoidal_table(5, 6)
    assert table.shape == (5, 6)
    np.testing.assert_allclose(table[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(table[:, 0], np.sin(np.arange(5)))
    np.testing.assert_allclose(table[:, 1], np.cos(np.arange(5)))
    assert np.all(np.abs(table) <= 1.0)
    assert sinusoidal_table(3, 5).shape == (3, 5)


@pytest.mark.parametrize("scale", [1.0, 1e3, 1e6])
def test_centers_stay_inside_the_video_for_large_summaries(float64, tiny_config, scale):
    generator, _ = _generator(tiny_config)
    encoded = np.random.default_rng(5).standard_normal((tiny_config.num_frames, tiny_config.hidden_dim))
    mu = pool_and_predict_centers(Tensor(scale * encoded), generator.params).data
    assert np.all((mu > 0.05) & (mu < 0.95))


def test_model_without_inter_negatives_shares_parameters(tiny_config):
    model = GCGModel.create(tiny_config)
    reduced = model.without_inter()
    assert reduced.store is model.store
    assert reduced.config.n_inter == 0
    assert model.config.n_inter == tiny_config.n_inter > 0
    assert reduced.config.with_overrides({"N_inter": tiny_config.n_inter}) == model.config
