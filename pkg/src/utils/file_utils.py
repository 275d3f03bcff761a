"""
File Utilities Module

This module contains file operation-related utility functions, responsible for:
- Turning sample ids into safe file names
- Content hashing for the pseudo-label cache
- Atomic writes so readers never observe half-written files

Main Functions:
- sanitize_filename: Clean a sample id into a legal file name
- file_sha256: Hex digest of a file's bytes
- atomic_write_bytes / atomic_write_text: Write through a temporary file

Author: GCG Development Team
Version: 1.0.0
"""

import hashlib
import os
import re
import tempfile

MAX_FILENAME_LENGTH = 200


def sanitize_filename(filename: str) -> str:
    """
    清理文件名，确保合法性

    移除路径分隔符、控制字符和文件系统不允许的字符，并限制长度。

    Args:
        filename: 原始名称（通常是样本 id）

    Returns:
        str: 清理后的合法文件名
    """
    # 移除Windows文件系统不允许的字符
    filename = re.sub(r'[<>:"/\\|?*]', "_", filename)

    # 移除控制字符
    filename = re.sub(r'[\x00-\x1f\x7f-\x9f]', "", filename)

    # 移除Unicode控制字符
    filename = re.sub(r"[\u200b-\u200f\u2028-\u202f\u2060-\u206f]", "", filename)

    filename = filename.strip().strip(".")[:MAX_FILENAME_LENGTH]
    return filename or "unnamed"


def file_sha256(path: str) -> str:
    """Return the hex SHA-256 of a file's content."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def atomic_write_bytes(path: str, data: bytes) -> None:
    """
    原子写入文件

    写入同目录下的临时文件后用 os.replace 替换目标，写者独占目标路径。
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
