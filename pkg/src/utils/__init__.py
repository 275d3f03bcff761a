"""
Utilities Module

Contains logging setup and file helper functions.
"""

from .logger import logger, get_logger, setup_logger, attach_file_handler, detach_handler
from .file_utils import sanitize_filename, file_sha256, ensure_dir, atomic_write_bytes, atomic_write_text

__all__ = [
    "logger",
    "get_logger",
    "setup_logger",
    "attach_file_handler",
    "detach_handler",
    "sanitize_filename",
    "file_sha256",
    "ensure_dir",
    "atomic_write_bytes",
    "atomic_write_text",
]
