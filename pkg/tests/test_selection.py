import numpy as np
import pytest

from src.core import numerics as nx
from src.core.exceptions import ConfigurationError, ContractError
from src.core.numerics import ComputationRecord, Tensor
from src.core.selection import (derive_seed, gather_frames, gather_hard, gather_selected, hard_topk,
                                linearized_topk, mine_negatives, perturbed_topk, uniform_indices)


def test_perturbed_selection_of_clear_winners(float64):
    p = Tensor(np.array([0.9, 0.1, 0.5, 0.2]))
    S = perturbed_topk(p, 2, 1e-3, 10000, seed=0).data
    expected = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    assert np.max(np.abs(S - expected)) < 0.05
    np.testing.assert_allclose(S.sum(axis=1), 1.0, atol=1e-6)


def test_perturbed_selection_is_seeded(float64):
    p = Tensor(np.array([0.5, 0.49, 0.51, 0.2, 0.3]))
    a = perturbed_topk(p, 3, 0.1, 200, seed=4).data
    b = perturbed_topk(p, 3, 0.1, 200, seed=4).data
    np.testing.assert_array_equal(a, b)
    assert np.all(a >= 0) and np.all(a <= 1)


def test_perturbed_backward_matches_linearization(float64):
    rng = np.random.default_rng(0)
    anchor = rng.uniform(0, 1, 6)
    g = rng.standard_normal((2, 6))

    p = Tensor(anchor.copy(), requires_grad=True)
    with ComputationRecord() as record:
        loss = nx.reduce_sum(nx.mul(perturbed_topk(p, 2, 0.05, 50, seed=3), g))
        nx.backward(loss, record)

    q = Tensor(anchor.copy(), requires_grad=True)
    with ComputationRecord() as record:
        value = linearized_topk(q, anchor, 2, 0.05, 50, seed=3)
        nx.backward(nx.reduce_sum(nx.mul(value, g)), record)

    np.testing.assert_allclose(p.grad, q.grad, rtol=1e-12)


def test_linearization_is_exact_at_anchor(float64):
    anchor = np.array([0.3, 0.8, 0.1, 0.6])
    value = linearized_topk(Tensor(anchor), anchor, 2, 0.05, 40, seed=1).data
    np.testing.assert_array_equal(value, perturbed_topk(Tensor(anchor), 2, 0.05, 40, seed=1).data)


def test_selection_rejects_k_above_t(float64):
    with pytest.raises(ContractError):
        perturbed_topk(Tensor(np.ones(3)), 4, 1e-3, 10, seed=0)


def test_hard_topk_matches_sorting():
    rng = np.random.default_rng(11)
    for _ in range(200):
        T = int(rng.integers(1, 16))
        k = int(rng.integers(1, T + 1))
        p = np.round(rng.uniform(0, 1, T), 1)
        order = sorted(range(T), key=lambda t: (-p[t], t))[:k]
        assert hard_topk(p, k) == tuple(sorted(t + 1 for t in order))


def test_uniform_indices():
    assert uniform_indices(32, 4) == (5, 13, 21, 29)
    assert uniform_indices(8, 8) == tuple(range(1, 9))
    with pytest.raises(ContractError):
        uniform_indices(4, 5)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)


def test_intra_negatives_are_lowest_weight_frames_outside_selection():
    p = np.array([0.9, 0.0, 0.5, 0.0, 0.2, 0.8])
    negatives = mine_negatives(p, (1, 6), batch_size=1, anchor=0, n_intra=3, n_inter=0, seed=0)
    assert negatives.intra == (2, 4, 5)
    assert negatives.inter == ()


def test_no_intra_negatives():
    negatives = mine_negatives(np.ones(4), (1,), batch_size=2, anchor=0, n_intra=0, n_inter=0, seed=0)
    assert negatives.intra == ()


def test_too_many_intra_negatives():
    with pytest.raises(ContractError):
        mine_negatives(np.ones(4), (1, 2), batch_size=2, anchor=0, n_intra=3, n_inter=0, seed=0)


def test_inter_negatives_need_a_second_sample():
    with pytest.raises(ConfigurationError):
        mine_negatives(np.ones(4), (1,), batch_size=1, anchor=0, n_intra=1, n_inter=2, seed=0)


def test_inter_negatives_come_from_other_samples():
    negatives = mine_negatives(np.ones(5), (1,), batch_size=4, anchor=2, n_intra=0, n_inter=200,
                               seed=7, num_frames=[5, 3, 5, 2])
    assert len(negatives.inter) == 200
    assert all(b != 2 for b, _ in negatives.inter)
    assert {b for b, _ in negatives.inter} == {0, 1, 3}
    lengths = [5, 3, 5, 2]
    assert all(1 <= t <= lengths[b] for b, t in negatives.inter)
    again = mine_negatives(np.ones(5), (1,), batch_size=4, anchor=2, n_intra=0, n_inter=200,
                           seed=7, num_frames=[5, 3, 5, 2])
    assert again == negatives


def test_gather_functions(float64):
    frames = np.arange(12, dtype=np.float64).reshape(4, 3)
    np.testing.assert_array_equal(gather_hard((2, 4), frames).data, frames[[1, 3]])
    with pytest.raises(ContractError):
        gather_hard((0,), frames)

    S = Tensor(np.array([[0.5, 0.5, 0.0, 0.0]]))
    np.testing.assert_allclose(gather_selected(S, frames).data, [[1.5, 2.5, 3.5]])

    others = [frames, frames * 10]
    picked = gather_frames(others, [(1, 2), (0, 1)], np.float64)
    np.testing.assert_array_equal(picked, [[30.0, 40.0, 50.0], [0.0, 1.0, 2.0]])
    assert gather_frames(others, [], np.float64).shape == (0, 3)


def test_intra_negatives_for_single_selection():
    p = np.array([0.9, 0.1, 0.5, 0.2])
    hard = hard_topk(p, 1)
    assert hard == (1,)
    assert mine_negatives(p, hard, batch_size=1, anchor=0, n_intra=2, n_inter=0, seed=0).intra == (2, 4)


def test_uniform_selection_rows_average_the_frames(float64):
    frames = np.random.default_rng(0).standard_normal((5, 3))
    S = Tensor(np.full((2, 5), 0.2))
    out = gather_selected(S, frames).data
    np.testing.assert_allclose(out, np.tile(frames.mean(axis=0), (2, 1)), atol=1e-12)


@pytest.mark.parametrize("eps", [1e-6, 1e-7])
def test_vanishing_perturbation_reduces_to_hard_selection(float64, eps):
    rng = np.random.default_rng(17)
    for _ in range(100):
        T = int(rng.integers(2, 17))
        k = int(rng.integers(1, T + 1))
        # 相邻取值至少相差 0.8/T，远大于扰动幅度
        p = (rng.permutation(T) + rng.uniform(0.0, 0.2, T)) / T
        S = perturbed_topk(Tensor(p), k, eps, 20, seed=int(rng.integers(1 << 30))).data
        assert set(np.unique(S)) <= {0.0, 1.0}
        assert tuple(sorted(int(i) + 1 for i in S.argmax(axis=1))) == hard_topk(p, k)
