"""
核心模块

包含运行配置、数值计算、数据读写以及定位模型的全部核心功能。
"""

from .config import Config, RunConfig, load_config
from .exceptions import GCGError

__all__ = ["Config", "RunConfig", "load_config", "GCGError"]
