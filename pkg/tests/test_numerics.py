import numpy as np
import pytest

from src.core import numerics as nx
from src.core.exceptions import ContractError, InvalidMaskError, NumericError, ShapeError
from src.core.numerics import ComputationRecord, Tensor


def _param(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_matmul_sum_gradient(float64):
    a = _param([[1.0, 2.0], [3.0, 4.0]])
    b = _param([[0.5, -1.0, 2.0], [1.5, 0.0, -0.5]])
    with ComputationRecord() as record:
        loss = nx.reduce_sum(nx.matmul(a, b))
        nx.backward(loss, record)
    np.testing.assert_allclose(a.grad, np.ones((2, 3)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 3)))


def test_backward_accumulates_until_zeroed(float64):
    x = _param([1.0, -2.0, 3.0])
    for _ in range(2):
        with ComputationRecord() as record:
            nx.backward(nx.reduce_sum(nx.mul(x, x)), record)
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)


def test_reused_intermediate_gradients_add_up(float64):
    x = _param([0.3, -0.7])
    with ComputationRecord() as record:
        y = nx.sigmoid(x)
        nx.backward(nx.reduce_sum(nx.add(y, y)), record)
    s = 1.0 / (1.0 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, 2 * s * (1 - s))


def test_constants_are_not_recorded(float64):
    a = Tensor(np.ones((2, 2)))
    with ComputationRecord() as record:
        nx.matmul(a, a)
    assert len(record) == 0


def test_recorded_tags_follow_execution_order(float64):
    x = _param([1.0, 2.0])
    with ComputationRecord() as record:
        nx.reduce_sum(nx.exp(nx.scale(x, 2.0)))
    assert record.tags() == ["scale", "exp", "sum"]


def test_backward_needs_scalar(float64):
    x = _param([1.0, 2.0])
    with ComputationRecord() as record:
        y = nx.mul(x, 3.0)
        with pytest.raises(ContractError):
            nx.backward(y, record)


def test_matmul_rejects_mismatched_extents():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_rejects_non_broadcastable():
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_exp_overflow_is_reported():
    with pytest.raises(NumericError):
        nx.exp(Tensor(np.array([100.0], dtype=np.float32)))


def test_softmax_masked_entries_are_exactly_zero(float64):
    x = Tensor(np.array([[1.0, 5.0, 2.0], [0.0, 0.0, 0.0]]))
    mask = np.array([[True, False, True], [True, True, True]])
    y = nx.softmax_rows(x, mask).data
    assert y[0, 1] == 0.0
    np.testing.assert_allclose(y.sum(axis=1), 1.0)
    np.testing.assert_allclose(y[1], np.full(3, 1.0 / 3.0))


def test_softmax_fully_masked_row_raises():
    x = Tensor(np.zeros((2, 3)))
    mask = np.array([[True, True, True], [False, False, False]])
    with pytest.raises(InvalidMaskError):
        nx.softmax_rows(x, mask)


def test_logsumexp_is_stable_for_large_inputs(float64):
    x = Tensor(np.array([[1000.0, 1000.0]]))
    np.testing.assert_allclose(nx.logsumexp_rows(x).data, [1000.0 + np.log(2.0)])


def test_layer_norm_needs_two_columns():
    with pytest.raises(ContractError):
        nx.layer_norm(Tensor(np.ones((3, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_l2_normalize_rows_gives_unit_rows(float64):
    y = nx.l2_normalize_rows(Tensor(np.array([[3.0, 4.0], [0.0, 2.0]]))).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0)


def test_smooth_l1_branches(float64):
    y = nx.smooth_l1(Tensor(np.array([0.5, -2.0]))).data
    np.testing.assert_allclose(y, [0.125, 1.5])


def test_getitem_scatters_gradient(float64):
    x = _param([1.0, 2.0, 3.0])
    with ComputationRecord() as record:
        nx.backward(nx.reduce_sum(nx.getitem(x, np.array([2, 0, 2]))), record)
    np.testing.assert_allclose(x.grad, [1.0, 0.0, 2.0])


def test_reduce_max_routes_to_first_maximum(float64):
    x = _param([1.0, 3.0, 3.0])
    with ComputationRecord() as record:
        nx.backward(nx.reduce_max(x), record)
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


def test_layer_norm_matches_finite_differences(float64):
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((3, 4))
    gain, bias = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
    weights = rng.standard_normal((3, 4))

    def f(values):
        return float((nx.layer_norm(Tensor(values), gain, bias).data * weights).sum())

    x = _param(x0)
    with ComputationRecord() as record:
        out = nx.layer_norm(x, gain, bias)
        nx.backward(nx.reduce_sum(nx.mul(out, weights)), record)
    ok, rel, _ = nx.compare_gradients(x.grad, nx.finite_diff_grad(f, x0))
    assert ok, rel


def test_compare_gradients_ignores_unchecked_entries():
    numeric = np.array([1.0, np.nan])
    ok, rel, err = nx.compare_gradients(np.array([1.0, 123.0]), numeric)
    assert ok and rel == 0.0 and err == 0.0


def test_finite_diff_perturbs_only_requested_coordinates():
    grad = nx.finite_diff_grad(lambda v: float((v ** 2).sum()), np.array([1.0, 2.0, 3.0]), coords=[1])
    assert np.isnan(grad[0]) and np.isnan(grad[2])
    assert grad[1] == pytest.approx(4.0, rel=1e-6)


def test_precision_context_restores_previous_mode():
    assert nx.default_dtype() == np.float32
    with nx.precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert nx.default_dtype() == np.float32


def test_unknown_precision_is_rejected():
    with pytest.raises(ContractError):
        nx.set_precision("float16")


def test_pointwise_dispatch(float64):
    x = Tensor(np.array([-1.0, 2.0]))
    np.testing.assert_allclose(nx.pointwise(x, "relu").data, [0.0, 2.0])
    np.testing.assert_allclose(nx.pointwise(x, "scale", 3.0).data, [-3.0, 6.0])
    with pytest.raises(ContractError):
        nx.pointwise(x, "tanh")
