"""
帧选择模块

该模块负责从帧权重分布 p 中选帧，包括：
- 扰动 Top-K（蒙特卡洛平均的可微选择矩阵 S）
- 在固定噪声下对扰动 Top-K 的一阶线性化（供梯度校验使用）
- 离散 Top-K（推理和评估路径）
- 片段内负样本（权重最低的帧）和跨视频负样本（批内其他样本的随机帧）
- 软选择/硬选择下的帧嵌入汇聚

所有时间戳从 1 开始计数。

作者: GCG开发团队
版本: 1.0.0
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .exceptions import ConfigurationError, ContractError, ShapeError
from .numerics import Tensor


def derive_seed(*parts: int) -> int:
    """由若干整数派生一个独立的随机种子"""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def top_k_indices(scores: np.ndarray, k: int) -> Tuple[int, ...]:
    """
    分数最高的 k 个位置，并列时较小下标优先，结果按时间升序（从 1 开始）

    Raises:
        ContractError: k 超出 [1, T]
    """
    scores = np.asarray(scores).reshape(-1)
    if not 1 <= k <= scores.size:
        raise ContractError(f"K={k} 必须在 [1, T={scores.size}] 内")
    # 稳定排序保证并列时较小下标在前
    order = np.argsort(-scores, kind="stable")[:k]
    return tuple(int(i) + 1 for i in np.sort(order))


class _PerturbedDraw:
    """一次扰动采样：噪声矩阵 Z (n_p×T) 和每个样本按名次排列的下标 (n_p×K)"""

    def __init__(self, p: np.ndarray, k: int, eps: float, num_samples: int, seed: int):
        T = p.shape[0]
        if not 1 <= k <= T:
            raise ContractError(f"K={k} 必须在 [1, T={T}] 内")
        if eps <= 0:
            raise ContractError(f"eps_p 必须大于0，当前值: {eps}")
        if num_samples < 1:
            raise ContractError(f"n_p 必须至少为1，当前值: {num_samples}")
        rng = np.random.default_rng(seed)
        self.noise = rng.standard_normal((num_samples, T))
        perturbed = p.astype(np.float64)[None, :] + eps * self.noise
        self.order = np.argsort(-perturbed, axis=1, kind="stable")[:, :k]
        self.k, self.T, self.eps, self.num_samples = k, T, eps, num_samples

    def selection(self) -> np.ndarray:
        """S[k] = 第 k 名下标的 one-hot 平均"""
        counts = np.zeros((self.k, self.T))
        ranks = np.broadcast_to(np.arange(self.k), self.order.shape)
        np.add.at(counts, (ranks, self.order), 1.0)
        return counts / self.num_samples

    def jacobian_vector(self, direction: np.ndarray) -> np.ndarray:
        """估计的 ∂S/∂p 作用在 direction 上：(1/(n_p·ε)) Σ_n one-hot_n · ⟨Z_n, direction⟩"""
        weights = self.noise @ direction
        out = np.zeros((self.k, self.T))
        ranks = np.broadcast_to(np.arange(self.k), self.order.shape)
        np.add.at(out, (ranks, self.order), np.broadcast_to(weights[:, None], self.order.shape))
        return out / (self.num_samples * self.eps)

    def vector_jacobian(self, g: np.ndarray) -> np.ndarray:
        """反向传播：(1/(n_p·ε)) Σ_n ⟨one-hot_n, g⟩ · Z_n"""
        picked = g[np.arange(self.k)[None, :], self.order].sum(axis=1)
        return (picked @ self.noise) / (self.num_samples * self.eps)


def perturbed_topk(p: Tensor, k: int, eps: float, num_samples: int, seed: int) -> Tensor:
    """
    扰动 Top-K 选择

    采样 n_p 个标准正态向量 Z，对 p + ε·Z 排序，第 k 行为第 k 名下标的
    one-hot 平均。反向传播使用扰动估计量 (1/(n_p·ε))·Σ one-hot·Zᵀ。

    Returns:
        Tensor: K×T 选择矩阵，每行和为 1

    Raises:
        ContractError: K > T 或参数非法
    """
    if p.ndim != 1:
        raise ShapeError(f"p 必须是一维张量，当前维度: {p.shape}")
    draw = _PerturbedDraw(p.data, k, eps, num_samples, seed)
    return nx.custom_op("perturbed_topk", (p,), draw.selection(),
                        lambda g: (draw.vector_jacobian(g),))


def linearized_topk(p: Tensor, anchor: np.ndarray, k: int, eps: float, num_samples: int,
                    seed: int) -> Tensor:
    """
    扰动 Top-K 在 anchor 处的一阶展开 S0 + J0·(p − anchor)

    噪声和名次固定在 anchor 处，因此它是 p 的光滑函数，
    其精确导数就是 perturbed_topk 在 anchor 处使用的估计量。
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    if p.shape != anchor.shape:
        raise ShapeError(f"p {p.shape} 与展开点 {anchor.shape} 维度不一致")
    draw = _PerturbedDraw(anchor, k, eps, num_samples, seed)
    value = draw.selection() + draw.jacobian_vector(p.data.astype(np.float64) - anchor)
    return nx.custom_op("linearized_topk", (p,), value,
                        lambda g: (draw.vector_jacobian(g),))


def hard_topk(p: nx.ArrayLike, k: int) -> Tuple[int, ...]:
    """离散 Top-K：权重最高的 K 帧，并列取较小下标，按时间升序返回"""
    values = p.data if isinstance(p, Tensor) else np.asarray(p)
    return top_k_indices(values, k)


def uniform_indices(num_frames: int, k: int) -> Tuple[int, ...]:
    """均匀采样基线：第 k 段的中点帧 floor((k+0.5)·T/K)+1"""
    if not 1 <= k <= num_frames:
        raise ContractError(f"K={k} 必须在 [1, T={num_frames}] 内")
    return tuple(int(np.floor((i + 0.5) * num_frames / k)) + 1 for i in range(k))


@dataclass(frozen=True)
class NegativeSet:
    """
    负样本集合

    intra: 同一视频内的帧（从 1 开始）
    inter: 批内其他样本的 (样本下标, 帧) 引用，样本下标从 0 开始
    """

    intra: Tuple[int, ...]
    inter: Tuple[Tuple[int, int], ...]


def mine_negatives(p: nx.ArrayLike, hard_set: Iterable[int], batch_size: int, anchor: int,
                   n_intra: int, n_inter: int, seed: int,
                   num_frames: Optional[Sequence[int]] = None) -> NegativeSet:
    """
    挖掘负样本

    Args:
        p: 锚样本的帧权重分布
        hard_set: 锚样本的离散 Top-K（从 1 开始）
        batch_size: 批大小
        anchor: 锚样本在批内的下标
        n_intra: 片段内负样本数，取 p 最小的帧（排除 hard_set，并列取较小下标）
        n_inter: 跨视频负样本数，在其他样本的 (样本, 帧) 对上均匀抽取
        seed: 跨视频抽样的种子
        num_frames: 批内每个样本的帧数，默认与锚样本相同

    Raises:
        ContractError: n_intra 超过可用帧数
        ConfigurationError: 单样本批次却要求跨视频负样本
    """
    values = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64).reshape(-1)
    T = values.size
    hard = {int(t) for t in hard_set}
    available = [t for t in range(1, T + 1) if t not in hard]
    if not 0 <= n_intra <= len(available):
        raise ContractError(f"N_intra={n_intra} 超出可用帧数 {len(available)}")
    # 稳定排序：权重相同则较小下标优先
    ranked = sorted(available, key=lambda t: values[t - 1])
    intra = tuple(sorted(ranked[:n_intra]))

    inter: Tuple[Tuple[int, int], ...] = ()
    if n_inter > 0:
        if batch_size < 2:
            raise ConfigurationError(f"N_inter={n_inter} 需要批内至少两个样本，当前批大小: {batch_size}")
        if not 0 <= anchor < batch_size:
            raise ContractError(f"锚样本下标 {anchor} 不在批内")
        lengths = list(num_frames) if num_frames is not None else [T] * batch_size
        rng = np.random.default_rng(seed)
        others = rng.integers(0, batch_size - 1, size=n_inter)
        others = others + (others >= anchor)
        frames = [int(rng.integers(1, lengths[b] + 1)) for b in others]
        inter = tuple((int(b), f) for b, f in zip(others, frames))
    return NegativeSet(intra=intra, inter=inter)


def gather_selected(selection: Tensor, frames: nx.ArrayLike) -> Tensor:
    """软汇聚 Ê = S·frames，梯度同时流向 S 和 frames"""
    frames = nx.as_tensor(frames, dtype=selection.dtype)
    if selection.shape[1] != frames.shape[0]:
        raise ShapeError(f"选择矩阵 {selection.shape} 与帧嵌入 {frames.shape} 维度不一致")
    return nx.matmul(selection, frames)


def gather_hard(indices: Sequence[int], frames: nx.ArrayLike,
                dtype: Optional[np.dtype] = None) -> Tensor:
    """按离散下标（从 1 开始）取帧嵌入"""
    frames = nx.as_tensor(frames, dtype=dtype)
    rows = np.asarray(indices, dtype=np.int64) - 1
    if rows.size and (rows.min() < 0 or rows.max() >= frames.shape[0]):
        raise ContractError(f"下标 {tuple(indices)} 超出 [1, {frames.shape[0]}]")
    return frames[rows]


def gather_frames(frames_by_sample: Sequence[np.ndarray], refs: Sequence[Tuple[int, int]],
                  dtype: np.dtype) -> np.ndarray:
    """按 (样本下标, 帧) 引用取出跨视频负样本的嵌入"""
    width = frames_by_sample[0].shape[1]
    if not refs:
        return np.zeros((0, width), dtype=dtype)
    return np.stack([frames_by_sample[b][t - 1] for b, t in refs]).astype(dtype)
