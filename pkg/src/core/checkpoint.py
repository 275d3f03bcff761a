"""
检查点模块

该模块负责训练状态的保存和恢复，包括：
- 每个命名参数一个 GCGT 文件（params/），以及 Adam 一阶、二阶矩（moments/m、moments/v）
- index.json 记录步数、轮次、配置快照和参数名列表
- 恢复时逐字节还原参数、矩和步数，可继续训练

目录结构：
    <dir>/index.json
    <dir>/params/<name>.gcgt
    <dir>/moments/m/<name>.gcgt
    <dir>/moments/v/<name>.gcgt

作者: GCG开发团队
版本: 1.0.0
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List

import numpy as np

from .config import Config, RunConfig
from .exceptions import ContractError, ManifestNotFoundError
from .optimizer import ParamStore
from .tensor_io import read_tensor, write_tensor
from ..utils.file_utils import atomic_write_text, ensure_dir, sanitize_filename

logger = logging.getLogger(__name__)

INDEX_FILE = "index.json"
CHECKPOINT_VERSION = 1


@dataclass
class CheckpointState:
    """从磁盘读出的检查点内容"""

    values: Dict[str, np.ndarray]
    first_moment: Dict[str, np.ndarray]
    second_moment: Dict[str, np.ndarray]
    step: int
    epoch: int
    config: RunConfig

    def restore(self, store: ParamStore) -> ParamStore:
        store.load_state(self.values, self.first_moment, self.second_moment, self.step)
        return store


def _file_name(name: str) -> str:
    return sanitize_filename(name) + ".gcgt"


def save_checkpoint(store: ParamStore, out_dir: str, step: int, epoch: int,
                    config: RunConfig) -> str:
    """
    保存检查点

    参数和矩按 store 的精度写出；index.json 键排序、不含时间戳。
    """
    ensure_dir(out_dir)
    names: List[str] = store.names()
    for name, param in store:
        filename = _file_name(name)
        write_tensor(param.data, os.path.join(out_dir, "params", filename))
        write_tensor(store.first_moment[name], os.path.join(out_dir, "moments", "m", filename))
        write_tensor(store.second_moment[name], os.path.join(out_dir, "moments", "v", filename))
    index: Dict[str, Any] = {
        "version": CHECKPOINT_VERSION,
        "app_version": Config.APP_VERSION,
        "step": int(step),
        "epoch": int(epoch),
        "optimizer_step": int(store.step),
        "config": config.to_json_dict(),
        "params": names,
    }
    atomic_write_text(os.path.join(out_dir, INDEX_FILE), json.dumps(index, indent=2, sort_keys=True) + "\n")
    logger.info(f"检查点已保存: {out_dir} (轮次 {epoch}, 步数 {step})")
    return out_dir


def load_checkpoint(path: str) -> CheckpointState:
    """
    读取检查点目录

    Raises:
        ManifestNotFoundError: 目录或 index.json 不存在
        ContractError: index.json 内容不完整
    """
    index_path = os.path.join(path, INDEX_FILE)
    if not os.path.exists(index_path):
        raise ManifestNotFoundError(f"检查点不存在: {index_path}")
    with open(index_path, "r", encoding="utf-8") as fh:
        index = json.load(fh)
    for key in ("step", "epoch", "config", "params"):
        if key not in index:
            raise ContractError(f"检查点索引缺少字段 {key}: {index_path}")

    values, first, second = {}, {}, {}
    for name in index["params"]:
        filename = _file_name(name)
        values[name] = read_tensor(os.path.join(path, "params", filename)).data
        first[name] = read_tensor(os.path.join(path, "moments", "m", filename)).data
        second[name] = read_tensor(os.path.join(path, "moments", "v", filename)).data
    config = RunConfig().with_overrides(index["config"])
    return CheckpointState(values=values, first_moment=first, second_moment=second,
                           step=int(index.get("optimizer_step", index["step"])),
                           epoch=int(index["epoch"]), config=config)
