"""
张量文件模块

该模块负责 GCGT 二进制张量文件的读写，包括：
- 头部编码和解析（魔数、版本、精度代码、秩、各维大小）
- 按行主序、小端序写入和读取数据
- 只读取头部的快速校验（供清单校验使用）

文件布局（所有整数均为小端序）：
    magic      4 字节  b"GCGT"
    version    uint32
    precision  uint32  1 = 32 位, 2 = 64 位
    rank       uint32  不超过 8
    extents    rank × uint64
    payload    行主序标量，小端序

作者: GCG开发团队
版本: 1.0.0
"""

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Tuple, Union

import numpy as np

from .exceptions import FormatError, LengthError, UnsupportedError
from .numerics import Tensor
from ..utils.file_utils import atomic_write_bytes

MAGIC = b"GCGT"
VERSION = 1
MAX_RANK = 8

_PREAMBLE = struct.Struct("<4sIII")
_EXTENT = struct.Struct("<Q")

# 精度代码 -> 小端 numpy 类型
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass(frozen=True)
class TensorFileHeader:
    """GCGT 文件头"""

    version: int
    precision_code: int
    extents: Tuple[int, ...]

    @property
    def dtype(self) -> np.dtype:
        return _CODES[self.precision_code]

    @property
    def payload_size(self) -> int:
        return int(np.prod(self.extents, dtype=np.int64)) * self.dtype.itemsize

    @property
    def header_size(self) -> int:
        return _PREAMBLE.size + _EXTENT.size * len(self.extents)


def _precision_code(dtype: np.dtype) -> int:
    if dtype == np.float32:
        return 1
    if dtype == np.float64:
        return 2
    raise UnsupportedError(f"不支持的精度: {dtype}")


def encode_tensor(t: Union[Tensor, np.ndarray]) -> bytes:
    """把张量编码为 GCGT 字节串"""
    array = t.data if isinstance(t, Tensor) else np.asarray(t)
    if array.ndim > MAX_RANK:
        raise UnsupportedError(f"张量秩 {array.ndim} 超过上限 {MAX_RANK}")
    code = _precision_code(array.dtype)
    parts = [_PREAMBLE.pack(MAGIC, VERSION, code, array.ndim)]
    parts.extend(_EXTENT.pack(extent) for extent in array.shape)
    parts.append(np.ascontiguousarray(array, dtype=_CODES[code]).tobytes(order="C"))
    return b"".join(parts)


def write_tensor(t: Union[Tensor, np.ndarray], path: str) -> None:
    """
    写入 GCGT 文件

    先写临时文件再原子替换，读者不会看到写了一半的文件。
    """
    atomic_write_bytes(path, encode_tensor(t))


def _read_header(fh: BinaryIO, path: str) -> TensorFileHeader:
    preamble = fh.read(_PREAMBLE.size)
    if len(preamble) < 4 or preamble[:4] != MAGIC:
        raise FormatError(f"不是 GCGT 文件（魔数错误）: {path}")
    if len(preamble) < _PREAMBLE.size:
        raise LengthError(f"文件头被截断: {path}")
    _, version, code, rank = _PREAMBLE.unpack(preamble)
    if version != VERSION:
        raise FormatError(f"不支持的 GCGT 版本 {version}: {path}")
    if code not in _CODES:
        raise FormatError(f"未知精度代码 {code}: {path}")
    if rank > MAX_RANK:
        raise UnsupportedError(f"张量秩 {rank} 超过上限 {MAX_RANK}: {path}")
    raw = fh.read(_EXTENT.size * rank)
    if len(raw) < _EXTENT.size * rank:
        raise LengthError(f"维度信息被截断: {path}")
    extents = tuple(_EXTENT.unpack_from(raw, i * _EXTENT.size)[0] for i in range(rank))
    return TensorFileHeader(version=version, precision_code=code, extents=extents)


def read_header(path: str) -> TensorFileHeader:
    """
    只读取并校验文件头，同时核对文件总长度

    Raises:
        FormatError: 魔数、版本或精度代码错误
        LengthError: 文件长度与头部声明不符
        UnsupportedError: 秩超过上限
    """
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
    actual = os.path.getsize(path)
    expected = header.header_size + header.payload_size
    if actual != expected:
        raise LengthError(f"文件长度 {actual} 与声明的 {expected} 字节不符: {path}")
    return header


def read_tensor(path: str) -> Tensor:
    """
    读取 GCGT 文件，精度与写入时一致

    Returns:
        Tensor: 不参与梯度计算的张量
    """
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read(header.payload_size + 1)
    if len(payload) != header.payload_size:
        raise LengthError(
            f"数据长度 {len(payload)} 与声明的 {header.payload_size} 字节不符: {path}")
    array = np.frombuffer(payload, dtype=header.dtype).reshape(header.extents)
    native = array.astype(header.dtype.newbyteorder("="))
    return Tensor(native, dtype=native.dtype)
