#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Train Worker Module

This module runs the joint training loop, responsible for:
- Loading the manifest and cached pseudo-labels (no ground-truth access)
- Per-step forward (grounder → perturbed Top-K → losses), backward, AdamW update
- Step loss log, per-epoch metrics for train and (optional) held-out split
- Checkpoints with optimizer moments, resumable from a saved directory
- run_meta.json with the config snapshot and dataset sizes

Every random draw is derived from (seed, epoch, step, sample), so two runs
with the same seed, config and dataset write bitwise-identical files.

Main Classes:
- TrainWorker: training job with step/epoch callbacks
- EpochMetrics: per-epoch aggregate

Author: GCG Development Team
Version: 1.0.0
"""

import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

from src import __version__
from src.core import numerics as nx
from src.core.batching import LoadedDataset, check_compatible, iterate_batches
from src.core.checkpoint import load_checkpoint, save_checkpoint
from src.core.config import Config, RunConfig
from src.core.exceptions import ContractError
from src.core.grounder import PREFIX as GROUNDER_PREFIX
from src.core.manifest import load_manifest
from src.core.metrics_log import EPOCH_COLUMNS, STEP_COLUMNS, MetricsWriter, mean_or_none
from src.core.model import BatchResult, GCGModel, forward_batch
from src.core.optimizer import adamw_step, clip_grad_norm, grad_norm
from src.core.pseudolabel import agreement
from src.core.selection import derive_seed
from src.core.synth import center_error
from src.utils.file_utils import atomic_write_text, ensure_dir
from src.workers.base_worker import BaseWorker

logger = logging.getLogger("GCG")

CHECKPOINT_DIR = "checkpoint"
STEP_LOG = "steps.csv"
EPOCH_LOG = "metrics.csv"
RUN_META = "run_meta.json"


@dataclass
class EpochMetrics:
    """一个轮次、一个数据划分上的指标"""

    epoch: int
    split: str
    l_vqa: float
    l_reg: float
    l_con: float
    total: float
    recall: Optional[float]
    accuracy: float
    center_error: Optional[float]
    pseudo_label_agreement: float


class _Accumulator:
    """按样本累计损失和选择质量"""

    def __init__(self) -> None:
        self.losses: Dict[str, List[float]] = {"l_vqa": [], "l_reg": [], "l_con": [], "total": []}
        self.correct: List[bool] = []
        self.agreement: List[float] = []
        self.center_error: List[float] = []

    def add(self, result: BatchResult, batch) -> None:
        for name, value in result.losses.as_floats().items():
            self.losses[name].extend([value] * len(batch))
        for sample, outcome in zip(batch.samples, result.samples):
            self.correct.append(int(np.argmax(outcome.logits)) == sample.answer)
            self.agreement.append(agreement(outcome.plan.hard, sample.labels))
            # 训练路径只能对照伪标签
            self.center_error.append(center_error(outcome.mu, sample.labels, sample.frames.shape[0]))

    def summary(self, epoch: int, split: str) -> EpochMetrics:
        return EpochMetrics(
            epoch=epoch,
            split=split,
            l_vqa=float(np.mean(self.losses["l_vqa"])),
            l_reg=float(np.mean(self.losses["l_reg"])),
            l_con=float(np.mean(self.losses["l_con"])),
            total=float(np.mean(self.losses["total"])),
            # 训练路径不读取真实标注，召回率只在评估中给出
            recall=None,
            accuracy=float(np.mean(self.correct)),
            center_error=mean_or_none(self.center_error),
            pseudo_label_agreement=float(np.mean(self.agreement)),
        )


class SaturationMonitor:
    """
    中心饱和检测

    sigmoid 饱和后 μ 贴近 0 或 1，生成器几乎收不到梯度。
    按轮次累计饱和中心的比例和生成器梯度范数的最大值。
    """

    def __init__(self, margin: float = Config.SATURATION_MARGIN,
                 fraction: float = Config.SATURATION_FRACTION,
                 min_grad_norm: float = Config.SATURATION_MIN_GRAD_NORM):
        self.margin = margin
        self.limit = fraction
        self.min_grad_norm = min_grad_norm
        self.reset()

    def reset(self) -> None:
        self.saturated = 0
        self.centers = 0
        self.max_grad_norm = 0.0

    def observe(self, mu: np.ndarray, grounder_grad_norm: float) -> None:
        mu = np.asarray(mu, dtype=np.float64)
        self.saturated += int(np.sum(np.minimum(mu, 1.0 - mu) < self.margin))
        self.centers += mu.size
        self.max_grad_norm = max(self.max_grad_norm, float(grounder_grad_norm))

    @property
    def fraction(self) -> float:
        return self.saturated / self.centers if self.centers else 0.0

    def check(self, epoch: int) -> bool:
        """轮次结束时调用；检测到饱和或梯度消失时记录警告并返回 True"""
        stalled = self.centers > 0 and (self.fraction > self.limit or self.max_grad_norm < self.min_grad_norm)
        if stalled:
            logger.warning(f"轮次 {epoch}: 高斯中心饱和比例 {self.fraction:.2f}，"
                           f"生成器最大梯度范数 {self.max_grad_norm:.2e}，定位分支可能已停止学习；"
                           f"可尝试降低 lr 或启用 grad_clip")
        self.reset()
        return stalled


def evaluate_split(model: GCGModel, dataset: LoadedDataset, epoch: int, split: str) -> EpochMetrics:
    """在一个数据划分上用离散 Top-K 评估（不修改参数）"""
    config = model.config
    if len(dataset) < 2 and config.n_inter > 0:
        model = model.without_inter()
    acc = _Accumulator()
    for number, batch in enumerate(iterate_batches(dataset, config.batch_size, config.seed, epoch, shuffle=False)):
        acc.add(forward_batch(model, batch, derive_seed(config.seed, epoch, number, 0xE7A1), mode="hard"), batch)
    return acc.summary(epoch, split)


class TrainWorker(BaseWorker):
    """
    训练任务

    事件：
        step_finished(step, losses: dict)
        epoch_finished(metrics: EpochMetrics)
        centers_saturated(epoch, fraction)
        finished(checkpoint_dir)
    """

    EVENTS = ("step_finished", "epoch_finished", "centers_saturated", "finished")

    def __init__(self, config: RunConfig, manifest_path: str, out_dir: str,
                 resume_from: Optional[str] = None, eval_manifest_path: Optional[str] = None,
                 show_progress: bool = True):
        super().__init__(out_dir)
        self.config = config
        self.manifest_path = manifest_path
        self.eval_manifest_path = eval_manifest_path
        self.resume_from = resume_from
        self.show_progress = show_progress
        self.model: Optional[GCGModel] = None
        self.history: List[EpochMetrics] = []

    def run(self) -> str:
        """执行训练，返回最终检查点目录"""
        self._open_run_log()
        try:
            return self._train()
        finally:
            self._close_run_log()

    def _train(self) -> str:
        config = self.config
        nx.set_precision(config.precision)
        dtype = np.dtype(config.precision)
        ensure_dir(self.out_dir)

        manifest = load_manifest(self.manifest_path)
        check_compatible(manifest, config)
        if not manifest.records:
            raise ContractError(f"训练清单中没有样本: {self.manifest_path}")
        dataset = LoadedDataset.load(manifest, config.num_select, dtype, self.show_progress)
        eval_dataset = None
        if self.eval_manifest_path:
            eval_manifest = load_manifest(self.eval_manifest_path)
            check_compatible(eval_manifest, config)
            if eval_manifest.records:
                eval_dataset = LoadedDataset.load(eval_manifest, config.num_select, dtype, self.show_progress)

        model = GCGModel.create(config)
        start_epoch, step = 0, 0
        if self.resume_from:
            state = load_checkpoint(self.resume_from)
            state.restore(model.store)
            start_epoch, step = state.epoch, state.step
            logger.info(f"从检查点恢复: {self.resume_from} (轮次 {start_epoch}, 步数 {step})")
        self.model = model
        self._write_run_meta(len(dataset), len(eval_dataset) if eval_dataset else 0)

        checkpoint_dir = os.path.join(self.out_dir, CHECKPOINT_DIR)
        steps_log = MetricsWriter(os.path.join(self.out_dir, STEP_LOG), STEP_COLUMNS, flush_every=50)
        epoch_log = MetricsWriter(os.path.join(self.out_dir, EPOCH_LOG), EPOCH_COLUMNS)
        logger.info(f"开始训练: {len(dataset)} 个样本, {config.epochs} 轮, "
                    f"批大小 {config.batch_size}, 参数量 {model.store.num_values()}")

        monitor = SaturationMonitor()
        save_checkpoint(model.store, checkpoint_dir, step, start_epoch, config)
        for epoch in range(start_epoch, config.epochs):
            acc = _Accumulator()
            batches = iterate_batches(dataset, config.batch_size, config.seed, epoch)
            for number, batch in enumerate(tqdm(list(batches), desc=f"轮次 {epoch + 1}/{config.epochs}",
                                                disable=not self.show_progress)):
                self._check_cancelled()
                step_seed = derive_seed(config.seed, epoch, number)
                model.store.zero_grad()
                with nx.ComputationRecord() as record:
                    result = forward_batch(model, batch, step_seed)
                    nx.backward(result.losses.total, record)
                monitor.observe(np.concatenate([s.mu for s in result.samples]),
                                grad_norm(model.store, GROUNDER_PREFIX + "."))
                clip_grad_norm(model.store, config.grad_clip)
                adamw_step(model.store, config.lr, config.beta1, config.beta2,
                           config.adam_eps, config.weight_decay)
                step += 1
                losses = result.losses.as_floats()
                acc.add(result, batch)
                steps_log.write_row(dict(losses, step=step, epoch=epoch + 1))
                self._notify_callbacks("step_finished", step, losses)

            fraction = monitor.fraction
            if monitor.check(epoch + 1):
                self._notify_callbacks("centers_saturated", epoch + 1, fraction)
            metrics = [acc.summary(epoch + 1, "train")]
            if eval_dataset is not None:
                metrics.append(evaluate_split(model, eval_dataset, epoch + 1, "test"))
            for m in metrics:
                epoch_log.write_row(asdict(m))
                self.history.append(m)
                self._notify_callbacks("epoch_finished", m)
            logger.info(f"轮次 {epoch + 1} 完成: 总损失 {metrics[0].total:.4f}, "
                        f"答案准确率 {metrics[0].accuracy:.3f}, 伪标签一致率 {metrics[0].pseudo_label_agreement:.3f}")
            save_checkpoint(model.store, checkpoint_dir, step, epoch + 1, config)

        steps_log.close()
        epoch_log.close()
        self._notify_callbacks("finished", checkpoint_dir)
        logger.info(f"训练完成: {checkpoint_dir}")
        return checkpoint_dir

    def _write_run_meta(self, train_size: int, eval_size: int) -> None:
        meta = {
            "app_version": __version__,
            "config": self.config.to_json_dict(),
            "train_samples": train_size,
            "eval_samples": eval_size,
            "parameters": self.model.store.num_values(),
            "resumed": bool(self.resume_from),
        }
        atomic_write_text(os.path.join(self.out_dir, RUN_META), json.dumps(meta, indent=2, sort_keys=True) + "\n")
