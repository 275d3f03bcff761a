#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Sweep Worker Module

This module runs one-axis ablations on the synthetic benchmark:
- Axes T, sigma, N_intra, N_inter, K, D_G, N and objective (loss components)
- One independent train + evaluate run per (value, seed), nothing shared
  between runs except the generated dataset files
- Invalid values are skipped with a logged reason; the rest still run
- sweep.csv with one row per (value, seed)

Main Classes:
- SweepWorker: sweep job with per-value callbacks

Author: GCG Development Team
Version: 1.0.0
"""

import logging
import os
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from src.core.config import RunConfig
from src.core.exceptions import ConfigValidationError, ContractError, GCGError
from src.core.manifest import load_manifest
from src.core.metrics_log import MetricsWriter
from src.core.pseudolabel import label_manifest
from src.core.synth import SynthResult, SynthSpec, generate_dataset
from src.workers.base_worker import BaseWorker
from src.workers.eval_worker import EvaluateWorker
from src.workers.train_worker import TrainWorker

logger = logging.getLogger("GCG")

# 除 objective 外，轴名即 RunConfig 的 JSON 键
AXES = ("T", "sigma", "N_intra", "N_inter", "K", "D_G", "N", "objective")
INT_AXES = ("T", "N_intra", "N_inter", "K", "D_G", "N")
OBJECTIVES = ("vqa", "vqa+reg", "vqa+con", "full")

SWEEP_FILE = "sweep.csv"
SWEEP_COLUMNS = ("axis", "value", "seed", "epochs", "final_loss",
                 "recall", "accuracy", "center_error",
                 "uniform_recall", "uniform_accuracy", "oracle_recall", "oracle_accuracy")


def parse_value(axis: str, raw: Any) -> Any:
    """把命令行给出的取值转换为该轴的类型"""
    if axis not in AXES:
        raise ContractError(f"不支持的扫描轴: {axis}，可选: {', '.join(AXES)}")
    if axis == "objective":
        value = str(raw)
        if value not in OBJECTIVES:
            raise ContractError(f"未知的目标组合: {value}，可选: {', '.join(OBJECTIVES)}")
        return value
    try:
        number = float(raw)
    except (TypeError, ValueError):
        raise ContractError(f"{axis} 的取值必须是数字，当前值: {raw}")
    if axis in INT_AXES:
        if not number.is_integer():
            raise ContractError(f"{axis} 必须是整数，当前值: {raw}")
        return int(number)
    return number


def overrides_for(axis: str, value: Any, base: RunConfig) -> Dict[str, Any]:
    """一个扫描取值对应的配置覆盖项"""
    if axis != "objective":
        return {axis: value}
    alpha_reg = base.alpha_reg if value in ("vqa+reg", "full") else 0.0
    alpha_con = base.alpha_con if value in ("vqa+con", "full") else 0.0
    return {"alpha1": alpha_reg, "alpha2": alpha_con}


class SweepWorker(BaseWorker):
    """
    消融扫描任务

    事件：
        run_finished(row: dict)
        value_finished(value, rows: list)
        value_skipped(value, reason: str)
    """

    EVENTS = ("run_finished", "value_finished", "value_skipped")

    def __init__(self, base_config: RunConfig, spec: SynthSpec, axis: str,
                 values: Sequence[Any], seeds: Sequence[int], out_dir: str,
                 show_progress: bool = True):
        super().__init__(out_dir)
        if axis not in AXES:
            raise ContractError(f"不支持的扫描轴: {axis}，可选: {', '.join(AXES)}")
        if not seeds:
            raise ContractError("至少需要一个随机种子")
        self.base_config = base_config
        self.spec = spec
        self.axis = axis
        self.values = list(values)
        self.seeds = [int(s) for s in seeds]
        self.show_progress = show_progress
        self.rows: List[Dict[str, Any]] = []
        self.skipped: List[Tuple[Any, str]] = []
        self._datasets: Dict[int, SynthResult] = {}
        self._labelled_k: Dict[int, int] = {}

    def run(self) -> List[Dict[str, Any]]:
        self._open_run_log()
        try:
            return self._sweep()
        finally:
            self._close_run_log()

    def _resolve(self, raw: Any) -> Optional[RunConfig]:
        try:
            value = parse_value(self.axis, raw)
            config = self.base_config.with_overrides(overrides_for(self.axis, value, self.base_config))
            if config.num_frames < self.spec.num_planted:
                raise ContractError(f"T={config.num_frames} 小于植入帧数 K*={self.spec.num_planted}")
        except (ConfigValidationError, ContractError) as e:
            reason = "; ".join(e.errors) if isinstance(e, ConfigValidationError) else str(e)
            logger.warning(f"跳过 {self.axis}={raw}: {reason}")
            self.skipped.append((raw, reason))
            self._notify_callbacks("value_skipped", raw, reason)
            return None
        return config

    def _prepare_data(self, config: RunConfig) -> SynthResult:
        """按 T 生成（或复用）数据集，并确保伪标签缓存与 K 一致"""
        T, K = config.num_frames, config.num_select
        if T not in self._datasets:
            spec = replace(self.spec, num_frames=T, input_dim=config.input_dim)
            self._datasets[T] = generate_dataset(spec, os.path.join(self.out_dir, "data", f"T{T}"),
                                                 show_progress=self.show_progress)
        data = self._datasets[T]
        if self._labelled_k.get(T) != K:
            for path in (data.train_manifest, data.test_manifest):
                label_manifest(load_manifest(path), K, show_progress=False)
            self._labelled_k[T] = K
        return data

    def _sweep(self) -> List[Dict[str, Any]]:
        table = MetricsWriter(os.path.join(self.out_dir, SWEEP_FILE), SWEEP_COLUMNS)
        logger.info(f"开始扫描 {self.axis}: 取值 {self.values}, 种子 {self.seeds}")
        for raw in tqdm(self.values, desc=f"扫描 {self.axis}", disable=not self.show_progress):
            self._check_cancelled()
            config = self._resolve(raw)
            if config is None:
                continue
            try:
                data = self._prepare_data(config)
            except GCGError as e:
                logger.warning(f"跳过 {self.axis}={raw}: 数据准备失败: {e}")
                self.skipped.append((raw, str(e)))
                self._notify_callbacks("value_skipped", raw, str(e))
                continue

            value_rows = []
            for seed in self.seeds:
                row = self._run_one(raw, config.with_overrides({"seed": seed}), data)
                table.write_row(row)
                value_rows.append(row)
                self._notify_callbacks("run_finished", row)
            self.rows.extend(value_rows)
            self._notify_callbacks("value_finished", raw, value_rows)

        table.close()
        logger.info(f"扫描完成: {len(self.rows)} 行, 跳过 {len(self.skipped)} 个取值")
        return self.rows

    def _run_one(self, raw: Any, config: RunConfig, data: SynthResult) -> Dict[str, Any]:
        run_dir = os.path.join(self.out_dir, "runs", f"{self.axis}={raw}", f"seed{config.seed}")
        trainer = TrainWorker(config, data.train_manifest, run_dir, show_progress=False)
        checkpoint = trainer.run()
        metrics = EvaluateWorker(checkpoint, data.test_manifest, os.path.join(run_dir, "eval"),
                                 ground_truth_path=data.ground_truth, show_progress=False).run()
        train_rows = [m for m in trainer.history if m.split == "train"]
        gcg, uniform, oracle = metrics["gcg"], metrics["uniform"], metrics["pseudo_label"]
        return {
            "axis": self.axis,
            "value": raw,
            "seed": config.seed,
            "epochs": config.epochs,
            "final_loss": train_rows[-1].total if train_rows else None,
            "recall": gcg.recall,
            "accuracy": gcg.accuracy,
            "center_error": gcg.center_error,
            "uniform_recall": uniform.recall,
            "uniform_accuracy": uniform.accuracy,
            "oracle_recall": oracle.recall,
            "oracle_accuracy": oracle.accuracy,
        }
