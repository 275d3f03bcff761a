"""
梯度校验模块

该模块负责用中心差分验证反向传播，包括：
- 逐算子校验：每个可导算子在若干随机实例上与有限差分比较
- 全链路校验：embed → encode → pool → masks → combine → 选择 → 三项损失 → 联合目标，
  对每个参数（大张量取固定种子的坐标子集）比较梯度
- 生成 JSON 报告（逐算子、逐参数组的最大相对误差）

全链路中扰动 Top-K 用其在当前点的一阶展开代替（同一噪声），
离散决策（Top-K、负样本、展开点）在校验期间保持冻结。
全部计算在 64 位精度下进行。

主要类：
- OpCheck / ParamCheck: 单项结果
- GradcheckReport: 完整报告

作者: GCG开发团队
版本: 1.0.0
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .batching import LoadedSample, make_batch, LoadedDataset
from .config import Config, RunConfig
from .exceptions import GCGError
from .grounder import combine_masks, gaussian_masks
from .manifest import Manifest, SampleRecord
from .model import GCGModel, forward_batch, parameter_groups
from .numerics import ComputationRecord, Tensor
from .objectives import AnswerHead, info_nce, regression_loss, vqa_surrogate_loss
from .selection import derive_seed, linearized_topk
from ..utils.file_utils import atomic_write_text

logger = logging.getLogger(__name__)

OpBuilder = Callable[[np.random.Generator], Tuple[List[np.ndarray], Callable[[List[Tensor]], Tensor]]]

# 校验实例的规模
DESK_CONFIG = {
    "T": 8, "K": 2, "D_I": 8, "D_G": 16, "N": 2, "heads": 4,
    "N_intra": 2, "N_inter": 3, "n_p": 50, "batch_size": 2, "precision": "float64",
}
DESK_QUESTION_LEN = 4
DESK_CANDIDATES = 5


@dataclass
class OpCheck:
    """一个算子的校验结果"""

    name: str
    passed: bool
    max_rel_error: float
    max_abs_error: float
    instances: int
    error: Optional[str] = None


@dataclass
class ParamCheck:
    """一个参数的全链路校验结果"""

    name: str
    group: str
    passed: bool
    max_rel_error: float
    max_abs_error: float
    coords: int


@dataclass
class GradcheckReport:
    """梯度校验报告"""

    ops: List[OpCheck] = field(default_factory=list)
    params: List[ParamCheck] = field(default_factory=list)
    elapsed_seconds: float = 0.0
    chain_error: Optional[str] = None

    @property
    def failed_ops(self) -> List[str]:
        return [op.name for op in self.ops if not op.passed]

    @property
    def failed_params(self) -> List[str]:
        return [p.name for p in self.params if not p.passed]

    @property
    def passed(self) -> bool:
        return not self.failed_ops and not self.failed_params and self.chain_error is None

    def group_summary(self) -> List[Dict[str, object]]:
        groups: Dict[str, List[ParamCheck]] = {}
        for check in self.params:
            groups.setdefault(check.group, []).append(check)
        return [
            {
                "group": name,
                "passed": all(c.passed for c in checks),
                "max_rel_error": max(c.max_rel_error for c in checks),
                "max_abs_error": max(c.max_abs_error for c in checks),
                "params": [c.name for c in checks],
            }
            for name, checks in groups.items()
        ]

    def to_dict(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "precision": "float64",
            "rel_tol": Config.GRADCHECK_REL_TOL,
            "abs_tol": Config.GRADCHECK_ABS_TOL,
            "elapsed_seconds": round(self.elapsed_seconds, 3),
            "within_time_budget": self.elapsed_seconds < Config.GRADCHECK_TIME_BUDGET,
            "ops": [asdict(op) for op in self.ops],
            "parameter_groups": self.group_summary(),
            "parameters": [asdict(p) for p in self.params],
            "failed": self.failed_ops + self.failed_params,
            "chain_error": self.chain_error,
        }

    def save(self, path: str) -> str:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------- per-op cases

def _away(rng: np.random.Generator, shape, kinks: Sequence[float], low: float, high: float,
          margin: float = 0.1) -> np.ndarray:
    """在 [low, high] 内均匀采样，避开不可导点附近"""
    x = rng.uniform(low, high, shape)
    for _ in range(100):
        bad = np.zeros(x.shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(x - k) < margin
        if not bad.any():
            break
        x[bad] = rng.uniform(low, high, int(bad.sum()))
    return x


def _unary(fn: Callable[[Tensor], Tensor], low: float = -2.0, high: float = 2.0,
           kinks: Sequence[float] = ()) -> OpBuilder:
    def build(rng: np.random.Generator):
        return [_away(rng, (3, 4), kinks, low, high)], lambda t: fn(t[0])
    return build


def _binary(fn: Callable[[Tensor, Tensor], Tensor], shape_a, shape_b,
            b_low: float = -2.0, b_high: float = 2.0) -> OpBuilder:
    def build(rng: np.random.Generator):
        return ([rng.standard_normal(shape_a), rng.uniform(b_low, b_high, shape_b)],
                lambda t: fn(t[0], t[1]))
    return build


def _softmax_case(rng: np.random.Generator):
    mask = rng.random((3, 4)) < 0.7
    mask[np.arange(3), rng.integers(0, 4, 3)] = True
    return [rng.standard_normal((3, 4))], lambda t: nx.softmax_rows(t[0], mask)


def _layer_norm_case(rng: np.random.Generator):
    return ([rng.standard_normal((3, 4)), rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)],
            lambda t: nx.layer_norm(t[0], t[1], t[2]))


def _masks_case(rng: np.random.Generator):
    return [rng.uniform(0.1, 0.9, 3)], lambda t: gaussian_masks(t[0], 0.2, 8).g


def _combine_case(rng: np.random.Generator):
    return [rng.uniform(0.1, 0.9, 3)], lambda t: combine_masks(gaussian_masks(t[0], 0.2, 8))


def _regression_case(rng: np.random.Generator):
    labels = tuple(int(v) + 1 for v in np.sort(rng.choice(8, 3, replace=False)))
    mu = np.sort(rng.choice(np.linspace(0.05, 0.95, 19), 3, replace=False)) + rng.uniform(-0.01, 0.01, 3)
    return [rng.permutation(mu)], lambda t: regression_loss(t[0], labels, 8)


def _info_nce_case(rng: np.random.Generator):
    arrays = [rng.standard_normal(5), rng.standard_normal((2, 5)),
              rng.standard_normal((3, 5)), rng.standard_normal((2, 5))]
    return arrays, lambda t: info_nce(t[0], t[1], t[2], t[3], 0.5)


def _linearized_case(rng: np.random.Generator):
    p = rng.uniform(0.0, 1.0, 6)
    seed = int(rng.integers(1 << 31))
    return [p], lambda t: linearized_topk(t[0], p, 2, 0.05, 50, seed)


def _vqa_case(rng: np.random.Generator):
    D, C = 8, 5
    question = rng.standard_normal((4, D))
    mask = np.array([True, True, True, False])
    candidates = rng.standard_normal((C, D))
    answer = int(rng.integers(C))
    arrays = [rng.standard_normal((2, D)),
              rng.standard_normal((2 * D, D)) / 4.0, rng.standard_normal(D) * 0.1,
              rng.standard_normal((D, D)) / 3.0, rng.standard_normal(D) * 0.1]

    def fn(t: List[Tensor]) -> Tensor:
        head = AnswerHead(fc1_weight=t[1], fc1_bias=t[2], fc2_weight=t[3], fc2_bias=t[4])
        return vqa_surrogate_loss(t[0], question, mask, candidates, answer, head)[0]

    return arrays, fn


def _getitem_case(rng: np.random.Generator):
    return [rng.standard_normal((3, 4))], lambda t: t[0][np.array([0, 2, 2])]


def _concat_case(rng: np.random.Generator):
    return ([rng.standard_normal((2, 3)), rng.standard_normal((1, 3))],
            lambda t: nx.concat([t[0], t[1]], axis=0))


def op_cases() -> Dict[str, OpBuilder]:
    """算子名 → 随机实例构造器；算子在调用时按名称从 numerics 查找"""
    return {
        "matmul": _binary(lambda a, b: nx.matmul(a, b), (3, 4), (4, 2)),
        "add": _binary(lambda a, b: nx.add(a, b), (3, 4), (4,)),
        "sub": _binary(lambda a, b: nx.sub(a, b), (3, 4), (3, 1)),
        "mul": _binary(lambda a, b: nx.mul(a, b), (3, 4), (3, 4)),
        "div": _binary(lambda a, b: nx.div(a, b), (3, 4), (3, 4), 0.5, 2.0),
        "sigmoid": _unary(lambda x: nx.sigmoid(x)),
        "exp": _unary(lambda x: nx.exp(x)),
        "gelu": _unary(lambda x: nx.gelu(x)),
        "relu": _unary(lambda x: nx.relu(x), kinks=(0.0,)),
        "scale": _unary(lambda x: nx.scale(x, 1.7)),
        "add_bias": _binary(lambda a, b: nx.add_bias(a, b), (3, 4), (4,)),
        "smooth_l1": _unary(lambda x: nx.smooth_l1(x, 1.0), -3.0, 3.0, kinks=(-1.0, 1.0)),
        "transpose": _unary(lambda x: nx.transpose(x)),
        "reshape": _unary(lambda x: nx.reshape(x, (2, 6))),
        "getitem": _getitem_case,
        "concat": _concat_case,
        "sum": _unary(lambda x: nx.reduce_sum(x, axis=1)),
        "mean": _unary(lambda x: nx.reduce_mean(x)),
        "max": _unary(lambda x: nx.reduce_max(x)),
        "min": _unary(lambda x: nx.reduce_min(x)),
        "softmax_rows": _softmax_case,
        "logsumexp_rows": _unary(lambda x: nx.logsumexp_rows(x)),
        "layer_norm": _layer_norm_case,
        "l2_normalize_rows": _unary(lambda x: nx.l2_normalize_rows(x)),
        "gaussian_masks": _masks_case,
        "combine_masks": _combine_case,
        "regression_loss": _regression_case,
        "info_nce": _info_nce_case,
        "linearized_topk": _linearized_case,
        "vqa_surrogate_loss": _vqa_case,
    }


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return nx.reduce_sum(nx.mul(out, weights))


def check_op(name: str, builder: OpBuilder, instances: int, rng: np.random.Generator) -> OpCheck:
    """在若干随机实例上比较一个算子的解析梯度和有限差分"""
    worst_rel, worst_abs, passed = 0.0, 0.0, True
    try:
        for _ in range(instances):
            arrays, fn = builder(rng)
            shape = fn([Tensor(a) for a in arrays]).shape
            weights = rng.standard_normal(shape)
            params = [Tensor(a, requires_grad=True) for a in arrays]
            with ComputationRecord() as record:
                loss = _weighted(fn(params), weights)
                nx.backward(loss, record)
            for j, array in enumerate(arrays):

                def f(x: np.ndarray, j: int = j) -> float:
                    inputs = [Tensor(x if k == j else a) for k, a in enumerate(arrays)]
                    return _weighted(fn(inputs), weights).item()

                analytic = params[j].grad if params[j].grad is not None else np.zeros_like(array)
                ok, rel, err = nx.compare_gradients(analytic, nx.finite_diff_grad(f, array))
                passed = passed and ok
                worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, err)
    except GCGError as e:
        return OpCheck(name, False, worst_rel, worst_abs, instances, error=str(e))
    return OpCheck(name, passed, worst_rel, worst_abs, instances)


def run_op_checks(instances: int = 20, seed: int = 0,
                  names: Optional[Sequence[str]] = None) -> List[OpCheck]:
    """逐算子校验（64 位）"""
    cases = op_cases()
    results = []
    with nx.precision("float64"):
        for name in (names or list(cases)):
            rng = np.random.default_rng(derive_seed(seed, sum(name.encode("utf-8"))))
            result = check_op(name, cases[name], instances, rng)
            if not result.passed:
                logger.error(f"算子 {name} 梯度校验失败: 最大相对误差 {result.max_rel_error:.3e} {result.error or ''}")
            results.append(result)
    return results


# ---------------------------------------------------------------- full chain

def desk_config(seed: int = 0) -> RunConfig:
    return RunConfig().with_overrides(dict(DESK_CONFIG, seed=seed))


def desk_dataset(config: RunConfig, seed: int) -> LoadedDataset:
    """梯度校验用的随机小数据集（不落盘）"""
    rng = np.random.default_rng(derive_seed(seed, 0xD35C))
    T, D = config.num_frames, config.input_dim
    samples = []
    for i in range(config.batch_size):
        record = SampleRecord(sample_id=f"desk-{i}", frames_path="", question_path="",
                              description_path="", candidates_path="",
                              answer=int(rng.integers(DESK_CANDIDATES)), num_frames=T,
                              question_len=DESK_QUESTION_LEN, input_dim=D,
                              num_candidates=DESK_CANDIDATES)
        labels = tuple(int(t) + 1 for t in np.sort(rng.choice(T, config.num_select, replace=False)))
        samples.append(LoadedSample(
            record=record,
            frames=rng.standard_normal((T, D)),
            question=rng.standard_normal((DESK_QUESTION_LEN - i, D)),
            description=rng.standard_normal(D),
            candidates=rng.standard_normal((DESK_CANDIDATES, D)),
            labels=labels,
        ))
    manifest = Manifest(path="", num_frames=T, input_dim=D, num_candidates=DESK_CANDIDATES,
                        question_len=None, records=[s.record for s in samples])
    return LoadedDataset(manifest=manifest, samples=samples)


def _sample_coords(size: int, rng: np.random.Generator, limit: int) -> np.ndarray:
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def run_chain_check(config: RunConfig, seed: int = 0,
                    max_coords: int = Config.GRADCHECK_MAX_COORDS) -> List[ParamCheck]:
    """
    全链路校验

    先在 hard 模式下做一次前向得到离散决策并冻结，再以 linearized 模式
    比较所有参数的反向梯度与有限差分。
    """
    with nx.precision("float64"):
        model = GCGModel.create(config, seed)
        dataset = desk_dataset(config, seed)
        batch = make_batch(dataset, list(range(len(dataset))))
        step_seed = derive_seed(seed, 0xC4A1)
        plans = [r.plan for r in forward_batch(model, batch, step_seed, mode="hard").samples]

        model.store.zero_grad()
        with ComputationRecord() as record:
            result = forward_batch(model, batch, step_seed, mode="linearized", plans=plans)
            nx.backward(result.losses.total, record)

        groups = {name: group for group, names in parameter_groups(model.store).items() for name in names}
        coord_rng = np.random.default_rng(derive_seed(seed, 0xC00D))
        checks = []
        for name, param in model.store:
            original = param.data.copy()

            def f(x: np.ndarray) -> float:
                param.data = x
                return forward_batch(model, batch, step_seed, mode="linearized",
                                     plans=plans).losses.total.item()

            coords = _sample_coords(param.size, coord_rng, max_coords)
            try:
                numeric = nx.finite_diff_grad(f, original, coords=coords)
            finally:
                param.data = original
            ok, rel, err = nx.compare_gradients(model.store.grad_of(name), numeric)
            if not ok:
                logger.error(f"参数 {name} 梯度校验失败: 最大相对误差 {rel:.3e}, 最大绝对误差 {err:.3e}")
            checks.append(ParamCheck(name=name, group=groups[name], passed=ok,
                                     max_rel_error=rel, max_abs_error=err, coords=int(coords.size)))
        return checks


def run_gradcheck(config: Optional[RunConfig] = None, seed: int = 0, op_instances: int = 20,
                  max_coords: int = Config.GRADCHECK_MAX_COORDS) -> GradcheckReport:
    """运行完整的梯度校验并返回报告"""
    config = config or desk_config(seed)
    if config.precision != "float64":
        config = config.with_overrides({"precision": "float64"})
    start = time.perf_counter()
    report = GradcheckReport(ops=run_op_checks(op_instances, seed))
    try:
        report.params = run_chain_check(config, seed, max_coords)
    except GCGError as e:
        report.chain_error = str(e)
        logger.error(f"全链路梯度校验出错: {e}")
    report.elapsed_seconds = time.perf_counter() - start
    if report.elapsed_seconds >= Config.GRADCHECK_TIME_BUDGET:
        logger.warning(f"梯度校验耗时 {report.elapsed_seconds:.1f}s 超过预算 {Config.GRADCHECK_TIME_BUDGET:.0f}s")
    logger.info(f"梯度校验完成: {'通过' if report.passed else '失败'} "
                f"(算子 {len(report.ops)}, 参数 {len(report.params)}, 用时 {report.elapsed_seconds:.1f}s)")
    return report
