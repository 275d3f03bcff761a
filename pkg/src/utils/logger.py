"""
Logging Utilities Module

This module contains logging-related utility functions, responsible for:
- Application logging system initialization and configuration
- Per-run log files in the output directory
- tqdm-compatible console output

Main Components:
- setup_logger: Setup root logger with a console handler
- attach_file_handler: Add a rotating file handler for one run
- get_logger: Named logger access
- logger: Global logger instance

Author: GCG Development Team
Version: 1.0.0
"""

import logging
from logging.handlers import RotatingFileHandler
from typing import Optional

from tqdm import tqdm

from ..core.config import Config

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

logger = logging.getLogger("GCG")


class TqdmHandler(logging.StreamHandler):
    """控制台处理器，经由 tqdm.write 输出以免打断进度条"""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record))
        except Exception:
            self.handleError(record)


def setup_logger(level: Optional[str] = None) -> logging.Logger:
    """设置根日志记录器，只保留控制台处理器"""
    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    level = getattr(logging, level or Config.LOG_LEVEL)

    console_handler = TqdmHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # 清除现有的处理器
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    root_logger.addHandler(console_handler)
    return root_logger


def attach_file_handler(log_file: str) -> Optional[logging.Handler]:
    """
    为一次运行添加滚动日志文件

    Args:
        log_file: 日志文件路径（通常是 <out>/run.log）

    Returns:
        logging.Handler: 新处理器；无法创建文件时返回 None
    """
    try:
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=Config.LOG_FILE_MAX_SIZE,
            backupCount=Config.LOG_BACKUP_COUNT,
            encoding="utf-8",
        )
    except OSError as e:
        logger.warning(f"无法创建日志文件 {log_file}: {e}")
        return None
    file_handler.setLevel(getattr(logging, Config.LOG_LEVEL))
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    logging.getLogger().addHandler(file_handler)
    return file_handler


def detach_handler(handler: Optional[logging.Handler]) -> None:
    if handler is None:
        return
    logging.getLogger().removeHandler(handler)
    handler.close()


def get_logger(name: str = None) -> logging.Logger:
    """
    获取日志记录器

    Args:
        name: 日志记录器名称，默认为应用主记录器
    """
    if name is None:
        return logging.getLogger("GCG")
    return logging.getLogger(name)


# 初始化日志系统
setup_logger()
