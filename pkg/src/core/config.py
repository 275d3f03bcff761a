"""
配置管理模块

该模块包含应用程序的全局配置参数和运行配置，负责：
- 应用程序版本信息和日志参数
- 数值计算、优化器和扰动选择的默认常量
- 单次运行的超参数（RunConfig）及其校验
- 从 JSON 文件加载运行配置

主要类：
- Config: 应用程序全局常量
- RunConfig: 一次训练/评估运行的超参数

作者: GCG开发团队
版本: 1.0.0
"""

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, List, Optional, Tuple

from .exceptions import ConfigValidationError


class Config:
    """
    应用程序全局配置类

    所有与单次运行无关的常量集中在此类中管理。

    Attributes:
        APP_VERSION (str): 应用程序版本号
        T_MAX (int): 位置编码表的最大帧数
        LAYER_NORM_EPS (float): 层归一化的 ε
        DEGENERATE_RANGE (float): 权重分布归一化时视为常数的阈值
        ADAM_BETA1 / ADAM_BETA2 / ADAM_EPS / WEIGHT_DECAY: AdamW 默认参数
        PERTURB_EPS (float): 扰动 Top-K 的噪声尺度
        PERTURB_SAMPLES (int): 扰动 Top-K 的蒙特卡洛采样数
        POSITIONAL_INIT_SCALE (float): 正弦位置编码初始化的幅度
        GRAD_CLIP_NORM (float): 全局梯度范数裁剪阈值（0 表示不裁剪）
        SATURATION_*: 中心饱和检测的阈值
        SYNTHETIC_*: 合成数据规模下的覆盖值（与 configs/synthetic.json 一致）
        GRADCHECK_*: 梯度校验的规模和容差
        LOG_FILE_MAX_SIZE (int): 日志文件最大大小（字节）
        LOG_BACKUP_COUNT (int): 日志备份文件数量
        LOG_LEVEL (str): 默认日志级别
    """

    APP_VERSION = "1.0.0"

    # 位置编码表覆盖 T 最大到 64 的扫描
    T_MAX = 64

    LAYER_NORM_EPS = 1e-5
    DEGENERATE_RANGE = 1e-12

    # AdamW 默认参数
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8
    WEIGHT_DECAY = 0.01

    # 扰动 Top-K
    PERTURB_EPS = 0.05
    PERTURB_SAMPLES = 200

    POSITIONAL_INIT_SCALE = 0.1
    GRAD_CLIP_NORM = 1.0

    # 中心距 0 或 1 小于 MARGIN 视为饱和；一个轮次内饱和比例超过 FRACTION
    # 或生成器梯度范数始终低于 MIN_GRAD_NORM 时告警
    SATURATION_MARGIN = 1e-3
    SATURATION_FRACTION = 0.5
    SATURATION_MIN_GRAD_NORM = 1e-8

    # 合成数据规模的覆盖值
    SYNTHETIC_LR = 1e-3
    SYNTHETIC_HIDDEN = 64
    SYNTHETIC_SIGMA = 0.05
    SYNTHETIC_ALPHA_REG = 10.0

    # 梯度校验
    GRADCHECK_STEP = 1e-5
    GRADCHECK_REL_TOL = 1e-4
    GRADCHECK_ABS_TOL = 1e-6
    GRADCHECK_MAX_COORDS = 32
    GRADCHECK_TIME_BUDGET = 60.0

    # 日志配置
    LOG_FILE_MAX_SIZE = 10 * 1024 * 1024  # 10MB
    LOG_BACKUP_COUNT = 5
    LOG_LEVEL = "INFO"

    @classmethod
    def validate_config(cls) -> Tuple[bool, List[str]]:
        """
        验证全局常量的有效性

        Returns:
            tuple[bool, list[str]]: (是否有效, 错误信息列表)
        """
        errors = []
        if not isinstance(cls.T_MAX, int) or cls.T_MAX <= 0:
            errors.append(f"T_MAX 必须是正整数，当前值: {cls.T_MAX}")
        if cls.LAYER_NORM_EPS <= 0:
            errors.append(f"LAYER_NORM_EPS 必须大于0，当前值: {cls.LAYER_NORM_EPS}")
        if not 0 <= cls.ADAM_BETA1 < 1 or not 0 <= cls.ADAM_BETA2 < 1:
            errors.append(f"Adam β 必须在 [0,1) 内，当前值: {cls.ADAM_BETA1}, {cls.ADAM_BETA2}")
        if cls.PERTURB_EPS <= 0 or cls.PERTURB_SAMPLES < 1:
            errors.append("扰动参数必须为正")
        if cls.LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            errors.append(f"LOG_LEVEL 无效: {cls.LOG_LEVEL}")
        return len(errors) == 0, errors

    @classmethod
    def get_config_summary(cls) -> Dict[str, Any]:
        """获取配置摘要信息"""
        return {
            "version": cls.APP_VERSION,
            "t_max": cls.T_MAX,
            "perturb_eps": cls.PERTURB_EPS,
            "perturb_samples": cls.PERTURB_SAMPLES,
            "log_level": cls.LOG_LEVEL,
        }


# JSON 键 -> RunConfig 属性
JSON_KEYS: Dict[str, str] = {
    "T": "num_frames",
    "K": "num_select",
    "D_I": "input_dim",
    "D_G": "hidden_dim",
    "N": "num_layers",
    "heads": "num_heads",
    "sigma": "sigma",
    "tau": "tau",
    "alpha1": "alpha_reg",
    "alpha2": "alpha_con",
    "N_intra": "n_intra",
    "N_inter": "n_inter",
    "lr": "lr",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "eps_p": "perturb_eps",
    "n_p": "perturb_samples",
    "precision": "precision",
    "weight_decay": "weight_decay",
    "beta1": "beta1",
    "beta2": "beta2",
    "adam_eps": "adam_eps",
    "grad_clip": "grad_clip",
}

PRECISIONS = ("float32", "float64")


@dataclass(frozen=True)
class RunConfig:
    """
    单次运行的超参数

    默认值：T=32, K=4, σ=0.2, τ=0.1, α1=α2=0.1,
    N_intra=16, N_inter=32, D_G=256, N=2, lr=1e-5。
    """

    num_frames: int = 32
    num_select: int = 4
    input_dim: int = 32
    hidden_dim: int = 256
    num_layers: int = 2
    num_heads: int = 4
    sigma: float = 0.2
    tau: float = 0.1
    alpha_reg: float = 0.1
    alpha_con: float = 0.1
    n_intra: int = 16
    n_inter: int = 32
    lr: float = 1e-5
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    perturb_eps: float = Config.PERTURB_EPS
    perturb_samples: int = Config.PERTURB_SAMPLES
    precision: str = "float32"
    weight_decay: float = Config.WEIGHT_DECAY
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    adam_eps: float = Config.ADAM_EPS
    grad_clip: float = Config.GRAD_CLIP_NORM

    def validate(self) -> Tuple[bool, List[str]]:
        """
        验证运行配置

        Returns:
            tuple[bool, list[str]]: (是否有效, 错误信息列表)
        """
        errors = []
        T, K = self.num_frames, self.num_select
        if not isinstance(T, int) or T < 1:
            errors.append(f"T 必须是正整数，当前值: {T}")
        elif T > Config.T_MAX:
            errors.append(f"T 不能超过 {Config.T_MAX}，当前值: {T}")
        if not isinstance(K, int) or K < 1:
            errors.append(f"K 必须是正整数，当前值: {K}")
        elif isinstance(T, int) and K > T:
            errors.append(f"K ({K}) 不能大于 T ({T})")
        if isinstance(T, int) and isinstance(K, int) and not 0 <= self.n_intra <= T - K:
            errors.append(f"N_intra 必须在 [0, T-K] 内，当前值: {self.n_intra}")
        if self.n_inter < 0:
            errors.append(f"N_inter 不能为负数，当前值: {self.n_inter}")
        if self.sigma <= 0:
            errors.append(f"sigma 必须大于0，当前值: {self.sigma}")
        if self.tau <= 0:
            errors.append(f"tau 必须大于0，当前值: {self.tau}")
        if self.alpha_reg < 0 or self.alpha_con < 0:
            errors.append(f"alpha1/alpha2 不能为负数，当前值: {self.alpha_reg}, {self.alpha_con}")
        if self.input_dim < 1:
            errors.append(f"D_I 必须是正整数，当前值: {self.input_dim}")
        if self.num_heads < 1 or self.hidden_dim < 2 or self.hidden_dim % self.num_heads:
            errors.append(f"D_G ({self.hidden_dim}) 必须至少为2且能被 heads ({self.num_heads}) 整除")
        if self.num_layers < 0:
            errors.append(f"N 不能为负数，当前值: {self.num_layers}")
        if self.lr <= 0:
            errors.append(f"lr 必须大于0，当前值: {self.lr}")
        if self.epochs < 0:
            errors.append(f"epochs 不能为负数，当前值: {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"batch_size 必须至少为1，当前值: {self.batch_size}")
        if self.perturb_eps <= 0:
            errors.append(f"eps_p 必须大于0，当前值: {self.perturb_eps}")
        if self.perturb_samples < 1:
            errors.append(f"n_p 必须至少为1，当前值: {self.perturb_samples}")
        if self.precision not in PRECISIONS:
            errors.append(f"precision 必须是 {PRECISIONS} 之一，当前值: {self.precision}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            errors.append(f"beta1/beta2 必须在 [0,1) 内，当前值: {self.beta1}, {self.beta2}")
        if self.weight_decay < 0 or self.adam_eps <= 0:
            errors.append("weight_decay 不能为负，adam_eps 必须大于0")
        if self.grad_clip < 0:
            errors.append(f"grad_clip 不能为负数，当前值: {self.grad_clip}")
        return len(errors) == 0, errors

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """按 JSON 键或属性名覆盖字段并重新校验"""
        config = replace(self, **_translate_keys(overrides))
        ok, errors = config.validate()
        if not ok:
            raise ConfigValidationError(errors)
        return config

    def to_json_dict(self) -> Dict[str, Any]:
        """导出为 JSON 键表示"""
        values = asdict(self)
        return {key: values[attr] for key, attr in JSON_KEYS.items()}


def _translate_keys(raw: Dict[str, Any]) -> Dict[str, Any]:
    attrs = {f.name for f in fields(RunConfig)}
    translated: Dict[str, Any] = {}
    unknown = []
    for key, value in raw.items():
        if key in JSON_KEYS:
            translated[JSON_KEYS[key]] = value
        elif key in attrs:
            translated[key] = value
        else:
            unknown.append(key)
    if unknown:
        raise ConfigValidationError([f"未知配置项: {key}" for key in sorted(unknown)])
    return translated


def load_config(path: Optional[str] = None) -> RunConfig:
    """
    从 JSON 文件加载运行配置

    缺省的键取默认值；空文件等价于 {}。

    Args:
        path: 配置文件路径，None 表示全部使用默认值

    Returns:
        RunConfig: 校验通过的运行配置

    Raises:
        ConfigValidationError: 任一校验规则不满足
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigValidationError([f"配置文件不存在: {path}"])
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read().strip()
        if text:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigValidationError([f"配置文件不是合法的 JSON: {e}"]) from e
            if not isinstance(raw, dict):
                raise ConfigValidationError(["配置文件顶层必须是对象"])
    return RunConfig().with_overrides(raw)
