"""
数据清单模块

该模块负责数据集清单（JSON）的读取、校验和写回，包括：
- 样本记录（SampleRecord）的解析
- 依据张量文件头校验维度，全部通过才返回（不会出现部分加载）
- 伪标签缓存的保存和有效性判断
- 样本张量的加载

清单格式：
    {
      "version": 1, "T": 32, "D_I": 32, "C": 5, "L_q": 8,
      "samples": [
        {"id": "...", "frames": "...", "question": "...", "description": "...",
         "candidates": "...", "answer": 0,
         "ground_truth": [..], "pseudo_labels": {"w": [..], "k": 4, "description_sha256": "..."}}
      ]
    }
路径相对于清单所在目录。

作者: GCG开发团队
版本: 1.0.0
"""

import json
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ExtentMismatchError, ManifestError, ManifestNotFoundError
from .tensor_io import read_header, read_tensor
from ..utils.file_utils import atomic_write_text, file_sha256

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class PseudoLabelCache:
    """清单中缓存的伪标签"""

    labels: Tuple[int, ...]
    k: int
    description_sha256: str


@dataclass(frozen=True)
class SampleRecord:
    """
    清单中的一条样本记录

    所有路径均为绝对路径；时间戳均从 1 开始计数。
    """

    sample_id: str
    frames_path: str
    question_path: str
    description_path: str
    candidates_path: str
    answer: int
    num_frames: int
    question_len: int
    input_dim: int
    num_candidates: int
    ground_truth: Optional[Tuple[int, ...]] = None
    pseudo_labels: Optional[PseudoLabelCache] = None

    def cached_labels(self, k: int) -> Optional[Tuple[int, ...]]:
        """缓存有效（K 一致且描述向量内容未变）时返回伪标签"""
        cache = self.pseudo_labels
        if cache is None or cache.k != k:
            return None
        if file_sha256(self.description_path) != cache.description_sha256:
            return None
        return cache.labels


@dataclass
class SampleData:
    """一个样本的全部冻结嵌入"""

    record: SampleRecord
    frames: np.ndarray
    question: np.ndarray
    description: np.ndarray
    candidates: np.ndarray


@dataclass
class Manifest:
    """校验通过的数据清单，可当作 SampleRecord 序列使用"""

    path: str
    num_frames: int
    input_dim: int
    num_candidates: int
    question_len: Optional[int]
    records: List[SampleRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> SampleRecord:
        return self.records[index]

    @property
    def base_dir(self) -> str:
        return os.path.dirname(os.path.abspath(self.path))


def _require(raw: Dict[str, Any], key: str, where: str) -> Any:
    if key not in raw:
        raise ManifestError(f"{where} 缺少字段 {key}")
    return raw[key]


def _check_timestamps(sample_id: str, name: str, values: Sequence[int], T: int) -> Tuple[int, ...]:
    values = tuple(int(v) for v in values)
    if any(v < 1 or v > T for v in values):
        raise ManifestError(f"样本 {sample_id} 的 {name} 超出 [1, {T}]: {values}")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ManifestError(f"样本 {sample_id} 的 {name} 必须严格升序且互不相同: {values}")
    return values


def _check_extents(sample_id: str, field_name: str, path: str, expected: Tuple[Optional[int], ...]) -> Tuple[int, ...]:
    if not os.path.exists(path):
        raise ManifestNotFoundError(f"样本 {sample_id} 的 {field_name} 文件不存在: {path}")
    extents = read_header(path).extents
    if len(extents) != len(expected) or any(e is not None and e != x for e, x in zip(expected, extents)):
        shown = tuple("*" if e is None else e for e in expected)
        raise ExtentMismatchError(sample_id, field_name, f"期望 {shown}，文件声明 {extents}")
    return extents


def _parse_record(raw: Dict[str, Any], base_dir: str, T: int, D: int, C: int,
                  L_q: Optional[int]) -> SampleRecord:
    sample_id = str(_require(raw, "id", "样本记录"))
    paths = {}
    for key in ("frames", "question", "description", "candidates"):
        value = _require(raw, key, f"样本 {sample_id}")
        paths[key] = value if os.path.isabs(value) else os.path.normpath(os.path.join(base_dir, value))

    record_lq = raw.get("L_q", L_q)
    _check_extents(sample_id, "frames", paths["frames"], (T, D))
    question_extents = _check_extents(sample_id, "question", paths["question"], (record_lq, D))
    if question_extents[0] < 1:
        raise ExtentMismatchError(sample_id, "question", "问题至少需要一个词")
    _check_extents(sample_id, "description", paths["description"], (D,))
    _check_extents(sample_id, "candidates", paths["candidates"], (C, D))

    answer = int(_require(raw, "answer", f"样本 {sample_id}"))
    if not 0 <= answer < C:
        raise ManifestError(f"样本 {sample_id} 的答案下标 {answer} 不在 [0, {C}) 内")

    ground_truth = None
    if raw.get("ground_truth") is not None:
        ground_truth = _check_timestamps(sample_id, "ground_truth", raw["ground_truth"], T)

    cache = None
    if raw.get("pseudo_labels") is not None:
        entry = raw["pseudo_labels"]
        labels = _check_timestamps(sample_id, "pseudo_labels", _require(entry, "w", sample_id), T)
        cache = PseudoLabelCache(labels=labels, k=int(entry.get("k", len(labels))),
                                 description_sha256=str(entry.get("description_sha256", "")))

    return SampleRecord(
        sample_id=sample_id,
        frames_path=paths["frames"],
        question_path=paths["question"],
        description_path=paths["description"],
        candidates_path=paths["candidates"],
        answer=answer,
        num_frames=T,
        question_len=int(question_extents[0]),
        input_dim=D,
        num_candidates=C,
        ground_truth=ground_truth,
        pseudo_labels=cache,
    )


def load_manifest(path: str) -> Manifest:
    """
    读取并校验数据清单

    每条记录都依据张量文件头校验；任何一条失败则整体失败。

    Raises:
        ManifestNotFoundError: 清单或引用的文件不存在
        ExtentMismatchError: 张量维度与清单声明不一致（指明样本和字段）
        ManifestError: 重复的样本 id 或其他内容错误
    """
    if not os.path.exists(path):
        raise ManifestNotFoundError(f"清单文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ManifestError(f"清单不是合法的 JSON: {e}") from e
    if not isinstance(raw, dict) or not isinstance(raw.get("samples"), list):
        raise ManifestError("清单顶层必须是包含 samples 数组的对象")

    samples = raw["samples"]
    base_dir = os.path.dirname(os.path.abspath(path))
    if samples:
        T = int(_require(raw, "T", "清单"))
        D = int(_require(raw, "D_I", "清单"))
        C = int(_require(raw, "C", "清单"))
    else:
        T, D, C = int(raw.get("T", 0)), int(raw.get("D_I", 0)), int(raw.get("C", 0))
    L_q = raw.get("L_q")
    L_q = int(L_q) if L_q is not None else None

    records: List[SampleRecord] = []
    seen = set()
    for entry in samples:
        record = _parse_record(entry, base_dir, T, D, C, L_q)
        if record.sample_id in seen:
            raise ManifestError(f"重复的样本 id: {record.sample_id}")
        seen.add(record.sample_id)
        records.append(record)

    return Manifest(path=os.path.abspath(path), num_frames=T, input_dim=D,
                    num_candidates=C, question_len=L_q, records=records)


def _record_to_json(record: SampleRecord, base_dir: str) -> Dict[str, Any]:
    entry: Dict[str, Any] = {
        "id": record.sample_id,
        "frames": os.path.relpath(record.frames_path, base_dir),
        "question": os.path.relpath(record.question_path, base_dir),
        "description": os.path.relpath(record.description_path, base_dir),
        "candidates": os.path.relpath(record.candidates_path, base_dir),
        "answer": record.answer,
    }
    if record.ground_truth is not None:
        entry["ground_truth"] = list(record.ground_truth)
    if record.pseudo_labels is not None:
        entry["pseudo_labels"] = {
            "w": list(record.pseudo_labels.labels),
            "k": record.pseudo_labels.k,
            "description_sha256": record.pseudo_labels.description_sha256,
        }
    return entry


def save_manifest(manifest: Manifest, path: Optional[str] = None) -> str:
    """写回清单（键排序、无时间戳，内容只取决于记录）"""
    path = os.path.abspath(path or manifest.path)
    base_dir = os.path.dirname(path)
    payload: Dict[str, Any] = {
        "version": MANIFEST_VERSION,
        "T": manifest.num_frames,
        "D_I": manifest.input_dim,
        "C": manifest.num_candidates,
        "samples": [_record_to_json(r, base_dir) for r in manifest.records],
    }
    if manifest.question_len is not None:
        payload["L_q"] = manifest.question_len
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def with_pseudo_labels(record: SampleRecord, labels: Sequence[int], k: int) -> SampleRecord:
    """返回带有新伪标签缓存的记录副本"""
    cache = PseudoLabelCache(labels=tuple(int(v) for v in labels), k=int(k),
                             description_sha256=file_sha256(record.description_path))
    return replace(record, pseudo_labels=cache)


def load_sample(record: SampleRecord) -> SampleData:
    """加载一个样本的全部嵌入（保持文件中的精度）"""
    return SampleData(
        record=record,
        frames=read_tensor(record.frames_path).data,
        question=read_tensor(record.question_path).data,
        description=read_tensor(record.description_path).data,
        candidates=read_tensor(record.candidates_path).data,
    )
