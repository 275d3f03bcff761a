#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Base Worker Module

Shared plumbing for the long-running jobs (training, evaluation, sweeps):
- Callback registry in place of GUI signals
- Cooperative cancellation checked between steps
- Per-run log file in the output directory

Main Classes:
- BaseWorker: callback registry + cancellation flag
- WorkerCancelled: raised when a job notices a cancel request

Author: GCG Development Team
Version: 1.0.0
"""

import logging
import os
import threading
from typing import Callable, Dict, List, Optional, Sequence

from src.utils.file_utils import ensure_dir
from src.utils.logger import attach_file_handler, detach_handler

logger = logging.getLogger("GCG")


class WorkerCancelled(Exception):
    """任务被取消"""


class BaseWorker:
    """
    工作任务基类

    子类在 ``EVENTS`` 中声明事件名，通过 register_callback 订阅；
    run() 在调用线程中同步执行。
    """

    EVENTS: Sequence[str] = ()

    def __init__(self, out_dir: Optional[str] = None):
        self.out_dir = out_dir
        self._callbacks: Dict[str, List[Callable]] = {event: [] for event in self.EVENTS}
        self._cancelled = threading.Event()
        self._log_handler: Optional[logging.Handler] = None

    def register_callback(self, event: str, callback: Callable) -> None:
        """注册回调函数"""
        if event not in self._callbacks:
            raise ValueError(f"未知事件: {event}")
        self._callbacks[event].append(callback)

    def _notify_callbacks(self, event: str, *args) -> None:
        """通知回调函数"""
        for callback in self._callbacks.get(event, []):
            try:
                callback(*args)
            except Exception as e:
                logger.error(f"回调函数执行失败: {e}")

    def cancel(self) -> None:
        """请求取消，在下一个检查点生效"""
        self._cancelled.set()
        logger.info("正在取消任务...")

    def _check_cancelled(self) -> None:
        if self._cancelled.is_set():
            raise WorkerCancelled("任务已取消")

    def _open_run_log(self) -> None:
        if self.out_dir is None:
            return
        ensure_dir(self.out_dir)
        self._log_handler = attach_file_handler(os.path.join(self.out_dir, "run.log"))

    def _close_run_log(self) -> None:
        detach_handler(self._log_handler)
        self._log_handler = None
