"""
批处理模块

该模块负责把清单中的样本组织成训练批次，包括：
- 一次性加载全部冻结嵌入并转换为运行精度
- 取得每个样本的伪标签（缓存有效则直接使用）
- 按 (种子, 轮次) 确定性打乱并切分批次；末尾单样本批次并入前一批
- 问题嵌入补零到批内最大长度并给出掩码

主要类：
- LoadedSample: 一个样本在内存中的全部输入
- LoadedDataset: 整个清单的样本集合
- Batch: 一个批次

作者: GCG开发团队
版本: 1.0.0
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .config import RunConfig
from .exceptions import ConfigurationError
from .manifest import Manifest, SampleRecord, load_sample
from .pseudolabel import labels_for_sample
from .selection import derive_seed

logger = logging.getLogger(__name__)


def check_compatible(manifest: Manifest, config: RunConfig) -> None:
    """
    清单的 T、D_I 必须与运行配置一致

    Raises:
        ConfigurationError: 任一维度不一致（列出全部不一致项）
    """
    if not manifest.records:
        return
    errors = []
    if manifest.num_frames != config.num_frames:
        errors.append(f"T: 清单 {manifest.num_frames}, 配置 {config.num_frames}")
    if manifest.input_dim != config.input_dim:
        errors.append(f"D_I: 清单 {manifest.input_dim}, 配置 {config.input_dim}")
    if errors:
        raise ConfigurationError(f"清单 {manifest.path} 与运行配置不一致: " + "; ".join(errors))


@dataclass
class LoadedSample:
    """一个样本的冻结输入和伪标签"""

    record: SampleRecord
    frames: np.ndarray
    question: np.ndarray
    description: np.ndarray
    candidates: np.ndarray
    labels: Tuple[int, ...]

    @property
    def sample_id(self) -> str:
        return self.record.sample_id

    @property
    def answer(self) -> int:
        return self.record.answer


@dataclass
class LoadedDataset:
    """内存中的数据集"""

    manifest: Manifest
    samples: List[LoadedSample]

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def load(cls, manifest: Manifest, k: int, dtype: np.dtype,
             show_progress: bool = True) -> "LoadedDataset":
        samples = []
        for record in tqdm(manifest.records, desc="加载样本", disable=not show_progress):
            data = load_sample(record)
            samples.append(LoadedSample(
                record=record,
                frames=data.frames.astype(dtype),
                question=data.question.astype(dtype),
                description=data.description.astype(dtype),
                candidates=data.candidates.astype(dtype),
                labels=labels_for_sample(record, k),
            ))
        logger.info(f"已加载 {len(samples)} 个样本: {manifest.path}")
        return cls(manifest=manifest, samples=samples)


@dataclass
class Batch:
    """一个批次；questions 已补零到批内最大长度"""

    indices: List[int]
    samples: List[LoadedSample]
    questions: List[np.ndarray]
    masks: List[np.ndarray]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def frames(self) -> List[np.ndarray]:
        return [s.frames for s in self.samples]


def pad_questions(questions: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    补零到最大长度

    Returns:
        tuple: (补零后的问题嵌入列表, 掩码列表；True 表示有效词)
    """
    longest = max(q.shape[0] for q in questions)
    padded, masks = [], []
    for q in questions:
        extra = longest - q.shape[0]
        padded.append(np.concatenate([q, np.zeros((extra, q.shape[1]), dtype=q.dtype)]) if extra else q)
        masks.append(np.arange(longest) < q.shape[0])
    return padded, masks


def batch_indices(count: int, batch_size: int, seed: int, epoch: int,
                  shuffle: bool = True) -> List[List[int]]:
    """
    一个轮次的批次划分

    打乱顺序只取决于 (seed, epoch)；末尾只剩一个样本时并入前一批，
    使跨视频负样本总有可用的其他样本。
    """
    order = np.arange(count)
    if shuffle:
        order = np.random.default_rng(derive_seed(seed, epoch, 0xBA7C)).permutation(count)
    batches = [order[i:i + batch_size].tolist() for i in range(0, count, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def make_batch(dataset: LoadedDataset, indices: Sequence[int]) -> Batch:
    samples = [dataset.samples[i] for i in indices]
    questions, masks = pad_questions([s.question for s in samples])
    return Batch(indices=list(indices), samples=samples, questions=questions, masks=masks)


def iterate_batches(dataset: LoadedDataset, batch_size: int, seed: int, epoch: int,
                    shuffle: bool = True, limit: Optional[int] = None):
    """按确定顺序逐个产生批次"""
    for number, indices in enumerate(batch_indices(len(dataset), batch_size, seed, epoch, shuffle)):
        if limit is not None and number >= limit:
            return
        yield make_batch(dataset, indices)
