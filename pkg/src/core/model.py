"""
模型组装模块

该模块把高斯生成器、帧选择、负样本挖掘和各项损失串成一个批次的前向计算，
训练、评估和梯度校验共用同一条路径：
- perturbed: 训练路径，扰动 Top-K 软选择
- linearized: 梯度校验路径，在固定的展开点和离散决策下使用一阶展开
- hard: 评估路径，离散 Top-K 直接取帧

主要类：
- GCGModel: 参数仓库 + 生成器 + 答案头
- SamplePlan: 一个样本的离散决策（展开点、Top-K、负样本），可冻结后复用

作者: GCG开发团队
版本: 1.0.0
"""

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .batching import Batch
from .checkpoint import load_checkpoint
from .config import RunConfig
from .exceptions import ContractError
from .grounder import GaussianGenerator, GrounderOutput, GrounderParams
from .objectives import (AnswerHead, LossBreakdown, info_nce, joint_loss, mean_breakdown,
                         regression_loss, vqa_surrogate_loss)
from .optimizer import ParamStore
from .selection import (NegativeSet, derive_seed, gather_frames, gather_hard, gather_selected,
                        hard_topk, linearized_topk, mine_negatives, perturbed_topk)

MODES = ("perturbed", "linearized", "hard")


@dataclass
class GCGModel:
    """全部可训练参数及其前向组件"""

    config: RunConfig
    store: ParamStore
    grounder: GrounderParams
    head: AnswerHead

    @property
    def generator(self) -> GaussianGenerator:
        return GaussianGenerator(self.grounder, self.config.sigma)

    @property
    def dtype(self) -> np.dtype:
        return self.store.dtype

    @classmethod
    def create(cls, config: RunConfig, seed: Optional[int] = None) -> "GCGModel":
        """按配置和种子初始化；参数精度取 config.precision"""
        seed = config.seed if seed is None else seed
        rng = np.random.default_rng(derive_seed(seed, 0x1417))
        store = ParamStore(np.dtype(config.precision))
        grounder = GrounderParams.create(store, config, rng)
        head = AnswerHead.create(store, config.input_dim, rng)
        return cls(config=config, store=store, grounder=grounder, head=head)

    @classmethod
    def from_checkpoint(cls, path: str) -> "GCGModel":
        """按检查点中的配置重建模型并载入参数和矩"""
        state = load_checkpoint(path)
        model = cls.create(state.config)
        state.restore(model.store)
        return model

    def without_inter(self) -> "GCGModel":
        """共享同一份参数、N_inter=0 的模型；单样本批次无法抽取跨视频负样本时使用"""
        return replace(self, config=self.config.with_overrides({"N_inter": 0}))


@dataclass
class SamplePlan:
    """一个样本的离散决策"""

    anchor: np.ndarray
    hard: Tuple[int, ...]
    negatives: NegativeSet
    selection_seed: int


@dataclass
class SampleResult:
    """一个样本的前向结果"""

    output: GrounderOutput
    losses: LossBreakdown
    logits: np.ndarray
    plan: SamplePlan

    @property
    def mu(self) -> np.ndarray:
        return np.array(self.output.mu.data, dtype=np.float64)


@dataclass
class BatchResult:
    """一个批次的前向结果：按样本顺序取均值的损失和每个样本的结果"""

    losses: LossBreakdown
    samples: List[SampleResult]


def plan_sample(p: np.ndarray, config: RunConfig, batch_size: int, anchor_index: int,
                step_seed: int) -> SamplePlan:
    """由权重分布做出离散决策（Top-K、负样本、扰动种子）"""
    hard = hard_topk(p, config.num_select)
    negatives = mine_negatives(p, hard, batch_size, anchor_index, config.n_intra, config.n_inter,
                               derive_seed(step_seed, anchor_index, 2))
    return SamplePlan(anchor=np.array(p, dtype=np.float64), hard=hard, negatives=negatives,
                      selection_seed=derive_seed(step_seed, anchor_index, 1))


def forward_batch(model: GCGModel, batch: Batch, step_seed: int, mode: str = "perturbed",
                  plans: Optional[Sequence[SamplePlan]] = None) -> BatchResult:
    """
    一个批次的前向计算和损失

    Args:
        model: 模型
        batch: 批次
        step_seed: 本步的派生种子（扰动噪声和跨视频抽样都由它派生）
        mode: perturbed / linearized / hard
        plans: 冻结的离散决策；linearized 模式必须提供

    Raises:
        ContractError: 模式未知或 linearized 模式缺少 plans
        ConfigurationError: 单样本批次却要求跨视频负样本
    """
    if mode not in MODES:
        raise ContractError(f"未知的前向模式: {mode}")
    if mode == "linearized" and plans is None:
        raise ContractError("linearized 模式需要冻结的离散决策")
    config = model.config
    dtype = model.dtype
    generator = model.generator
    frames_by_sample = batch.frames
    results: List[SampleResult] = []

    for i, sample in enumerate(batch.samples):
        frames = sample.frames
        output = generator(frames, batch.questions[i], batch.masks[i])
        plan = plans[i] if plans is not None else plan_sample(
            output.p.data, config, len(batch), i, step_seed)

        K = config.num_select
        if mode == "perturbed":
            selection = perturbed_topk(output.p, K, config.perturb_eps,
                                       config.perturb_samples, plan.selection_seed)
            selected = gather_selected(selection, frames)
        elif mode == "linearized":
            selection = linearized_topk(output.p, plan.anchor, K, config.perturb_eps,
                                        config.perturb_samples, plan.selection_seed)
            selected = gather_selected(selection, frames)
        else:
            selected = gather_hard(plan.hard, frames, dtype=dtype)

        intra = frames[np.asarray(plan.negatives.intra, dtype=np.int64) - 1]
        inter = gather_frames(frames_by_sample, plan.negatives.inter, dtype)
        l_reg = regression_loss(output.mu, sample.labels, frames.shape[0])
        l_con = info_nce(sample.description, selected, intra, inter, config.tau)
        l_vqa, logits = vqa_surrogate_loss(selected, batch.questions[i], batch.masks[i],
                                           sample.candidates, sample.answer, model.head)
        losses = joint_loss(l_vqa, l_reg, l_con, config.alpha_reg, config.alpha_con)
        results.append(SampleResult(output=output, losses=losses, logits=logits, plan=plan))

    return BatchResult(losses=mean_breakdown(r.losses for r in results), samples=results)


def parameter_groups(store: ParamStore) -> Dict[str, List[str]]:
    """按名称前两段分组（例如 grounder.layer0、head.fc1），用于梯度校验报告"""
    groups: Dict[str, List[str]] = {}
    for name in store.names():
        key = ".".join(name.split(".")[:2])
        groups.setdefault(key, []).append(name)
    return groups
