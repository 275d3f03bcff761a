"""
损失函数模块

该模块负责训练目标的计算，包括：
- 中心回归损失：μ 与伪标签 w/T 各自升序后配对的 SmoothL1（β=1）
- 对比损失（infoNCE）：描述向量与正样本帧、片段内/跨视频负样本，
  所有正样本共享同一个负样本和，向量先做 L2 归一化
- 答案损失：替代语言模型的两层感知机答案头 + 候选答案交叉熵
- 联合目标 total = l_vqa + α1·l_reg + α2·l_con

主要类：
- AnswerHead: 答案头参数
- LossBreakdown: 各项损失及其加权和

作者: GCG开发团队
版本: 1.0.0
"""

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .exceptions import ContractError, ShapeError
from .numerics import Tensor
from .optimizer import ParamStore

PREFIX = "head"


def regression_loss(mu: Tensor, labels: Sequence[int], num_frames: int) -> Tensor:
    """
    中心回归损失 Σ_k SmoothL1(μ_(k) − w_(k)/T)

    μ 和 w 分别升序排列后一一配对（一维最优匹配）。

    Raises:
        ContractError: μ 与 w 长度不一致
    """
    if mu.ndim != 1 or mu.shape[0] != len(labels):
        raise ContractError(f"μ 的长度 {mu.shape} 与伪标签数量 {len(labels)} 不一致")
    order = np.argsort(mu.data, kind="stable")
    target = np.sort(np.asarray(labels, dtype=np.float64)) / num_frames
    diff = nx.sub(mu[order], nx.as_tensor(target, dtype=mu.dtype))
    return nx.reduce_sum(nx.smooth_l1(diff, beta=1.0))


def _as_rows(x: nx.ArrayLike, dtype: np.dtype, width: int) -> Tensor:
    x = nx.as_tensor(x, dtype=dtype)
    if x.ndim == 1:
        x = nx.reshape(x, (1, x.shape[0]))
    if x.shape[1] != width:
        raise ShapeError(f"嵌入宽度 {x.shape[1]} 与描述向量宽度 {width} 不一致")
    return x


def info_nce(description: nx.ArrayLike, positives: Tensor, intra: nx.ArrayLike,
             inter: nx.ArrayLike, tau: float) -> Tensor:
    """
    对比损失

    loss = −(1/K)·Σ_k log[exp(s_k/τ) / (exp(s_k/τ) + SUM)]，
    SUM = Σ_i exp(n_i/τ)，对片段内和跨视频负样本求和并被所有正样本共享；
    s 和 n 为 L2 归一化后的点积。以 log-sum-exp 形式计算。

    Raises:
        ContractError: τ ≤ 0
    """
    if tau <= 0:
        raise ContractError(f"tau 必须大于0，当前值: {tau}")
    dtype = positives.dtype
    width = positives.shape[1]
    anchor = nx.l2_normalize_rows(_as_rows(description, dtype, width))
    pos = nx.l2_normalize_rows(positives)
    K = pos.shape[0]
    pos_logits = nx.scale(nx.matmul(pos, nx.transpose(anchor)), 1.0 / tau)

    negatives = [n for n in (_as_rows(intra, dtype, width), _as_rows(inter, dtype, width))
                 if n.shape[0] > 0]
    if negatives:
        neg = nx.l2_normalize_rows(negatives[0] if len(negatives) == 1 else nx.concat(negatives))
        neg_logits = nx.scale(nx.matmul(anchor, nx.transpose(neg)), 1.0 / tau)
        shared = nx.mul(nx.as_tensor(np.ones((K, 1)), dtype=dtype), neg_logits)
        rows = nx.concat([pos_logits, shared], axis=1)
    else:
        rows = pos_logits
    per_positive = nx.sub(nx.logsumexp_rows(rows), nx.reshape(pos_logits, (K,)))
    return nx.reduce_mean(per_positive)


@dataclass
class AnswerHead:
    """
    替代答案头：2·D_I → D_I（GELU）→ D_I

    输入为所选帧均值与问题掩码均值的拼接。
    """

    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    @property
    def input_dim(self) -> int:
        return self.fc2_weight.shape[1]

    @classmethod
    def create(cls, store: ParamStore, input_dim: int, rng: np.random.Generator) -> "AnswerHead":
        D = input_dim
        return cls(
            fc1_weight=store.add(f"{PREFIX}.fc1.weight", rng.normal(0.0, 1.0 / math.sqrt(2 * D), (2 * D, D))),
            fc1_bias=store.add(f"{PREFIX}.fc1.bias", np.zeros(D)),
            fc2_weight=store.add(f"{PREFIX}.fc2.weight", rng.normal(0.0, 1.0 / math.sqrt(D), (D, D))),
            fc2_bias=store.add(f"{PREFIX}.fc2.bias", np.zeros(D)),
        )

    def forward(self, features: Tensor) -> Tensor:
        hidden = nx.gelu(nx.add_bias(nx.matmul(features, self.fc1_weight), self.fc1_bias))
        return nx.add_bias(nx.matmul(hidden, self.fc2_weight), self.fc2_bias)


def masked_mean(question: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """问题词向量在有效位置上的均值"""
    question = np.asarray(question)
    keep = np.ones(question.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not keep.any():
        raise ContractError("问题至少需要一个有效词")
    return question[keep].mean(axis=0)


def vqa_surrogate_loss(selected: Tensor, question: np.ndarray, mask: Optional[np.ndarray],
                       candidates: np.ndarray, answer: int,
                       head: AnswerHead) -> Tuple[Tensor, np.ndarray]:
    """
    答案损失

    r = head([mean(selected); masked_mean(question)])，
    logits_c = ⟨r, candidate_c⟩/√D_I，loss = 交叉熵(logits, answer)。

    Returns:
        tuple[Tensor, np.ndarray]: (标量损失, C 个 logits)

    Raises:
        ContractError: answer 不在 [0, C) 内
    """
    dtype = selected.dtype
    candidates = nx.as_tensor(candidates, dtype=dtype)
    C, D = candidates.shape
    if not 0 <= answer < C:
        raise ContractError(f"答案下标 {answer} 不在 [0, {C}) 内")
    pooled = nx.reduce_mean(selected, axis=0, keepdims=True)
    context = nx.as_tensor(masked_mean(question, mask)[None, :], dtype=dtype)
    r = head.forward(nx.concat([pooled, context], axis=1))
    logits = nx.scale(nx.matmul(r, nx.transpose(candidates)), 1.0 / math.sqrt(D))
    loss = nx.sub(nx.reshape(nx.logsumexp_rows(logits), ()), logits[0, answer])
    return loss, np.array(logits.data.reshape(-1))


@dataclass
class LossBreakdown:
    """各项损失及联合目标 total = l_vqa + α1·l_reg + α2·l_con"""

    l_vqa: Tensor
    l_reg: Tensor
    l_con: Tensor
    total: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "l_vqa": self.l_vqa.item(),
            "l_reg": self.l_reg.item(),
            "l_con": self.l_con.item(),
            "total": self.total.item(),
        }


def joint_loss(l_vqa: Tensor, l_reg: Tensor, l_con: Tensor,
               alpha_reg: float, alpha_con: float) -> LossBreakdown:
    """
    联合目标

    Raises:
        ContractError: α1 或 α2 为负
    """
    if alpha_reg < 0 or alpha_con < 0:
        raise ContractError(f"alpha1/alpha2 不能为负数，当前值: {alpha_reg}, {alpha_con}")
    total = nx.add(nx.add(l_vqa, nx.scale(l_reg, alpha_reg)), nx.scale(l_con, alpha_con))
    return LossBreakdown(l_vqa=l_vqa, l_reg=l_reg, l_con=l_con, total=total)


def mean_breakdown(parts: Iterable[LossBreakdown]) -> LossBreakdown:
    """按固定顺序对多个样本的损失取均值"""
    parts = list(parts)
    if not parts:
        raise ContractError("至少需要一个样本的损失")
    scale = 1.0 / len(parts)

    def _mean(name: str) -> Tensor:
        acc = getattr(parts[0], name)
        for part in parts[1:]:
            acc = nx.add(acc, getattr(part, name))
        return nx.scale(acc, scale)

    return LossBreakdown(l_vqa=_mean("l_vqa"), l_reg=_mean("l_reg"),
                         l_con=_mean("l_con"), total=_mean("total"))
