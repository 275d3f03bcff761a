#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Evaluate Worker Module

This module evaluates a checkpoint on a manifest, responsible for:
- Discrete Top-K selection from the trained grounder (never the soft path)
- Fixed comparison arms: uniform sampling, description pseudo-labels
  (upper bound) and question-derived pseudo-labels
- Keyframe recall and center error against the ground-truth sidecar when one
  is given; answer accuracy always
- Per-sample selection dump and per-frame weight dump

The trained answer head scores every arm, so arms differ only in which frames
they feed it. Parameters are never modified.

Main Classes:
- EvaluateWorker: evaluation job
- ArmMetrics: aggregate for one arm

Author: GCG Development Team
Version: 1.0.0
"""

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.core import numerics as nx
from src.core.batching import LoadedDataset, LoadedSample, check_compatible, iterate_batches
from src.core.exceptions import ContractError
from src.core.manifest import load_manifest
from src.core.metrics_log import MetricsWriter, mean_or_none
from src.core.model import GCGModel, forward_batch
from src.core.objectives import vqa_surrogate_loss
from src.core.pseudolabel import agreement, question_scores, select_pseudo_labels
from src.core.selection import derive_seed, gather_hard, uniform_indices
from src.core.synth import GroundTruth, load_ground_truth, oracle_metrics
from src.utils.file_utils import atomic_write_text, ensure_dir
from src.workers.base_worker import BaseWorker

logger = logging.getLogger("GCG")

ARMS = ("gcg", "uniform", "pseudo_label", "question_pseudo_label")
EVAL_COLUMNS = ("arm", "samples", "l_vqa", "l_reg", "l_con", "total",
                "recall", "accuracy", "center_error", "pseudo_label_agreement")
SELECTION_COLUMNS = ("sample_id", "arm", "selected")

EVAL_METRICS = "eval_metrics.csv"
SELECTIONS = "selections.csv"
EVAL_SUMMARY = "eval_summary.json"


@dataclass
class ArmMetrics:
    """一个评估分支在整个数据集上的指标；不适用的项为 None"""

    arm: str
    samples: int
    l_vqa: float
    l_reg: Optional[float]
    l_con: Optional[float]
    total: Optional[float]
    recall: Optional[float]
    accuracy: float
    center_error: Optional[float]
    pseudo_label_agreement: float


@dataclass
class _ArmRecord:
    l_vqa: List[float] = field(default_factory=list)
    l_reg: List[float] = field(default_factory=list)
    l_con: List[float] = field(default_factory=list)
    total: List[float] = field(default_factory=list)
    recall: List[Optional[float]] = field(default_factory=list)
    correct: List[bool] = field(default_factory=list)
    center_error: List[Optional[float]] = field(default_factory=list)
    agreement: List[float] = field(default_factory=list)

    def summary(self, arm: str) -> ArmMetrics:
        return ArmMetrics(
            arm=arm,
            samples=len(self.correct),
            l_vqa=float(np.mean(self.l_vqa)),
            l_reg=mean_or_none(self.l_reg),
            l_con=mean_or_none(self.l_con),
            total=mean_or_none(self.total),
            recall=mean_or_none(self.recall),
            accuracy=float(np.mean(self.correct)),
            center_error=mean_or_none(self.center_error),
            pseudo_label_agreement=float(np.mean(self.agreement)),
        )


def baseline_selection(arm: str, sample: LoadedSample, k: int) -> Tuple[int, ...]:
    """固定对照分支的选帧"""
    T = sample.frames.shape[0]
    if arm == "uniform":
        return uniform_indices(T, k)
    if arm == "pseudo_label":
        return tuple(sample.labels)
    if arm == "question_pseudo_label":
        return select_pseudo_labels(question_scores(sample.frames, sample.question), k)
    raise ContractError(f"未知的评估分支: {arm}")


class EvaluateWorker(BaseWorker):
    """
    评估任务

    事件：
        finished(metrics: Dict[str, ArmMetrics])
    """

    EVENTS = ("finished",)

    def __init__(self, checkpoint_dir: str, manifest_path: str, out_dir: str,
                 ground_truth_path: Optional[str] = None, show_progress: bool = True):
        super().__init__(out_dir)
        self.checkpoint_dir = checkpoint_dir
        self.manifest_path = manifest_path
        self.ground_truth_path = ground_truth_path
        self.show_progress = show_progress
        self.selections: List[Tuple[str, str, Tuple[int, ...]]] = []

    def run(self) -> Dict[str, ArmMetrics]:
        self._open_run_log()
        try:
            return self._evaluate()
        finally:
            self._close_run_log()

    def _load_truth(self) -> Optional[Dict[str, GroundTruth]]:
        if not self.ground_truth_path:
            logger.warning("未提供真实标注，只报告答案准确率")
            return None
        if not os.path.exists(self.ground_truth_path):
            logger.warning(f"真实标注文件不存在，只报告答案准确率: {self.ground_truth_path}")
            return None
        return load_ground_truth(self.ground_truth_path)

    def _evaluate(self) -> Dict[str, ArmMetrics]:
        model = GCGModel.from_checkpoint(self.checkpoint_dir)
        config = model.config
        nx.set_precision(config.precision)
        digest = model.store.digest()
        truth = self._load_truth()

        manifest = load_manifest(self.manifest_path)
        check_compatible(manifest, config)
        if not manifest.records:
            raise ContractError(f"评估清单中没有样本: {self.manifest_path}")
        dataset = LoadedDataset.load(manifest, config.num_select, model.dtype, self.show_progress)
        if min(len(dataset), config.batch_size) < 2 and config.n_inter > 0:
            logger.warning("评估批次只有一个样本，跨视频负样本数按 0 计算损失")
            model = model.without_inter()

        records = {arm: _ArmRecord() for arm in ARMS}
        K = config.num_select
        batches = list(iterate_batches(dataset, config.batch_size, config.seed, 0, shuffle=False))
        for number, batch in enumerate(tqdm(batches, desc="评估", disable=not self.show_progress)):
            self._check_cancelled()
            result = forward_batch(model, batch, derive_seed(config.seed, number, 0xE7A1), mode="hard")
            for sample, outcome in zip(batch.samples, result.samples):
                sample_truth = truth.get(sample.sample_id) if truth else None
                T = sample.frames.shape[0]

                gcg = records["gcg"]
                for name, value in outcome.losses.as_floats().items():
                    getattr(gcg, name).append(value)
                self._score(gcg, "gcg", sample, outcome.plan.hard, outcome.logits, sample_truth,
                            mu=outcome.mu, num_frames=T)

                for arm in ARMS[1:]:
                    selected = baseline_selection(arm, sample, K)
                    l_vqa, logits = vqa_surrogate_loss(gather_hard(selected, sample.frames, model.dtype),
                                                       sample.question, None, sample.candidates,
                                                       sample.answer, model.head)
                    records[arm].l_vqa.append(l_vqa.item())
                    self._score(records[arm], arm, sample, selected, logits, sample_truth)

        if model.store.digest() != digest:
            raise ContractError("评估过程中参数被修改")
        metrics = {arm: records[arm].summary(arm) for arm in ARMS}
        self._write_outputs(metrics, truth is not None)
        for m in metrics.values():
            recall = "-" if m.recall is None else f"{m.recall:.3f}"
            logger.info(f"分支 {m.arm}: 召回率 {recall}, 答案准确率 {m.accuracy:.3f}")
        self._notify_callbacks("finished", metrics)
        return metrics

    def _score(self, record: _ArmRecord, arm: str, sample: LoadedSample, selected: Sequence[int],
               logits: np.ndarray, truth: Optional[GroundTruth], mu: Optional[np.ndarray] = None,
               num_frames: Optional[int] = None) -> None:
        result = oracle_metrics(selected, truth, logits, sample.answer, mu=mu, num_frames=num_frames)
        record.recall.append(result.recall)
        record.correct.append(result.correct)
        record.center_error.append(result.center_error)
        record.agreement.append(agreement(selected, sample.labels))
        self.selections.append((sample.sample_id, arm, tuple(selected)))

    def _write_outputs(self, metrics: Dict[str, ArmMetrics], has_truth: bool) -> None:
        ensure_dir(self.out_dir)
        table = MetricsWriter(os.path.join(self.out_dir, EVAL_METRICS), EVAL_COLUMNS)
        table.write_rows(asdict(m) for m in metrics.values())

        dump = MetricsWriter(os.path.join(self.out_dir, SELECTIONS), SELECTION_COLUMNS)
        dump.write_rows({"sample_id": s, "arm": a, "selected": sel} for s, a, sel in self.selections)

        summary = {
            "checkpoint": os.path.abspath(self.checkpoint_dir),
            "manifest": os.path.abspath(self.manifest_path),
            "ground_truth": has_truth,
            "arms": {arm: asdict(m) for arm, m in metrics.items()},
        }
        atomic_write_text(os.path.join(self.out_dir, EVAL_SUMMARY),
                          json.dumps(summary, indent=2, sort_keys=True) + "\n")
        logger.info(f"评估结果已保存: {self.out_dir}")


def dump_weights(checkpoint_dir: str, manifest_path: str, out_csv: str,
                 show_progress: bool = True) -> str:
    """
    导出每个样本每一帧的高斯掩码和归一化权重

    列：sample_id, t, g_1..g_K, p_t
    """
    model = GCGModel.from_checkpoint(checkpoint_dir)
    nx.set_precision(model.config.precision)
    K = model.config.num_select
    manifest = load_manifest(manifest_path)
    check_compatible(manifest, model.config)
    dataset = LoadedDataset.load(manifest, K, model.dtype, show_progress)
    generator = model.generator

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["sample_id", "t"] + [f"g_{k + 1}" for k in range(K)] + ["p_t"])
    for sample in tqdm(dataset.samples, desc="导出权重", disable=not show_progress):
        output = generator(sample.frames, sample.question)
        g, p = output.masks.g.data, output.p.data
        for t in range(sample.frames.shape[0]):
            writer.writerow([sample.sample_id, t + 1] + [f"{g[k, t]:.9g}" for k in range(K)]
                            + [f"{p[t]:.9g}"])
    atomic_write_text(out_csv, buffer.getvalue())
    logger.info(f"帧权重已导出: {out_csv}")
    return out_csv
