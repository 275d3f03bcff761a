"""
伪标签模块

该模块负责生成弱监督信号，包括：
- 描述嵌入与每一帧嵌入之间的余弦相似度
- 相似度最高的 K 个时间戳（伪标签 w，从 1 开始计数）
- 仅由问题嵌入得到的对照伪标签（问题词向量的掩码均值）
- 清单内伪标签缓存的刷新和分数导出

伪标签只依赖冻结的嵌入，每个样本计算一次后缓存在清单中；
缓存以描述向量文件的内容哈希判断是否失效。

主要函数：
- cosine_scores: 逐帧余弦相似度
- select_pseudo_labels: Top-K 时间戳（并列取较小下标）
- question_scores: 问题均值向量与各帧的余弦相似度
- label_manifest: 为整个清单计算并缓存伪标签

作者: GCG开发团队
版本: 1.0.0
"""

import csv
import io
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .exceptions import ContractError, DegenerateInputError
from .manifest import Manifest, SampleRecord, load_sample, save_manifest, with_pseudo_labels
from .selection import top_k_indices
from ..utils.file_utils import atomic_write_text

logger = logging.getLogger(__name__)


def cosine_scores(frames: np.ndarray, description: np.ndarray) -> np.ndarray:
    """
    逐帧余弦相似度 s_t = ⟨e_t, d⟩ / (‖e_t‖‖d‖)

    始终以 64 位计算。

    Args:
        frames: T×D_I 帧嵌入
        description: D_I 描述嵌入

    Returns:
        np.ndarray: 长度为 T 的分数，取值在 [-1, 1]

    Raises:
        DegenerateInputError: 某一帧或描述向量的范数为零（指明帧序号，从 1 开始；描述为 0）
    """
    frames = np.asarray(frames, dtype=np.float64)
    description = np.asarray(description, dtype=np.float64).reshape(-1)
    if frames.ndim != 2 or frames.shape[1] != description.shape[0]:
        raise ContractError(f"帧嵌入 {frames.shape} 与描述嵌入 {description.shape} 维度不一致")
    d_norm = np.linalg.norm(description)
    if d_norm == 0.0:
        raise DegenerateInputError("描述嵌入的范数为零", frame_index=0)
    norms = np.linalg.norm(frames, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        t = int(zero[0]) + 1
        raise DegenerateInputError(f"第 {t} 帧嵌入的范数为零", frame_index=t)
    scores = (frames @ description) / (norms * d_norm)
    return np.clip(scores, -1.0, 1.0)


def select_pseudo_labels(scores: np.ndarray, k: int) -> Tuple[int, ...]:
    """选出伪标签 w：Top-K 时间戳，升序，从 1 开始"""
    return top_k_indices(scores, k)


def question_scores(frames: np.ndarray, question: np.ndarray,
                    mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    问题对照分数：各帧与问题词向量（掩码）均值的余弦相似度

    Args:
        frames: T×D_I 帧嵌入
        question: L_q×D_I 问题词嵌入
        mask: 长度 L_q 的布尔数组，True 表示有效词
    """
    question = np.asarray(question, dtype=np.float64)
    keep = np.ones(question.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not keep.any():
        raise ContractError("问题至少需要一个有效词")
    return cosine_scores(frames, question[keep].mean(axis=0))


def labels_for_sample(record: SampleRecord, k: int) -> Tuple[int, ...]:
    """
    取一个样本的伪标签：缓存有效时直接返回，否则重新计算（不写回）
    """
    cached = record.cached_labels(k)
    if cached is not None:
        return cached
    if record.pseudo_labels is not None:
        logger.warning(f"样本 {record.sample_id} 的伪标签缓存已失效，重新计算")
    sample = load_sample(record)
    return select_pseudo_labels(cosine_scores(sample.frames, sample.description), k)


def label_manifest(manifest: Manifest, k: int, score_csv: Optional[str] = None,
                   show_progress: bool = True) -> Manifest:
    """
    为清单中的每个样本计算伪标签，写回清单，并可导出分数

    Args:
        manifest: 已校验的清单
        k: 每个样本的伪标签数量
        score_csv: 分数导出路径（列：sample_id, t, s_t），None 表示不导出
        show_progress: 是否显示进度条

    Returns:
        Manifest: 带有新缓存的清单（已保存到原路径）
    """
    if manifest.records and not 1 <= k <= manifest.num_frames:
        raise ContractError(f"K={k} 必须在 [1, T={manifest.num_frames}] 内")
    records: List[SampleRecord] = []
    rows: List[Tuple[str, int, float]] = []
    for record in tqdm(manifest.records, desc="伪标签", disable=not show_progress):
        sample = load_sample(record)
        scores = cosine_scores(sample.frames, sample.description)
        labels = select_pseudo_labels(scores, k)
        records.append(with_pseudo_labels(record, labels, k))
        rows.extend((record.sample_id, t + 1, float(s)) for t, s in enumerate(scores))

    manifest.records = records
    save_manifest(manifest)
    logger.info(f"已为 {len(records)} 个样本写入伪标签缓存 (K={k}): {manifest.path}")

    if score_csv is not None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["sample_id", "t", "s_t"])
        for sample_id, t, s in rows:
            writer.writerow([sample_id, t, f"{s:.9g}"])
        atomic_write_text(score_csv, buffer.getvalue())
        logger.info(f"相似度分数已导出: {score_csv}")
    return manifest


def agreement(selected: Sequence[int], labels: Sequence[int]) -> float:
    """两组时间戳的重合比例（按伪标签数量归一）"""
    if not labels:
        return 0.0
    return len(set(selected) & set(labels)) / len(labels)


def labels_by_id(manifest: Manifest, k: int) -> Dict[str, Tuple[int, ...]]:
    """清单中全部样本的伪标签，按样本 id 索引"""
    return {record.sample_id: labels_for_sample(record, k) for record in manifest.records}
