"""
合成数据模块

该模块负责生成带有植入关键帧的嵌入级视频问答数据集，包括：
- 数据集级的干扰场景原型池
- 每个样本的候选答案原型（两两余弦 < 0.3，拒绝采样）
- 植入时间戳（一半概率为连续片段，否则为分散帧）
- 帧、问题词、描述和候选答案嵌入的生成与写出
- 真实标注单独写入 ground_truth.json，训练路径不读取
- 评估用的关键帧召回、答案正确性和中心误差

数据集只由 SynthSpec 决定：相同规格两次生成的文件逐字节相同。

主要类：
- SynthSpec: 数据集规格
- GroundTruth: 一个样本的植入时间戳和答案

作者: GCG开发团队
版本: 1.0.0
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .exceptions import SpecError
from .manifest import MANIFEST_VERSION
from .selection import derive_seed
from .tensor_io import write_tensor
from ..utils.file_utils import atomic_write_text, ensure_dir

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 10000
MAX_COSINE = 0.3
CONTIGUOUS_PROBABILITY = 0.5
GROUND_TRUTH_FILE = "ground_truth.json"
SPLITS = ("train", "test")

# JSON 键 -> SynthSpec 属性
SPEC_KEYS: Dict[str, str] = {
    "D_I": "input_dim",
    "T": "num_frames",
    "K_star": "num_planted",
    "C": "num_candidates",
    "prototypes": "num_prototypes",
    "eta": "noise",
    "train": "num_train",
    "test": "num_test",
    "seed": "seed",
    "L_q": "question_len",
}


@dataclass(frozen=True)
class SynthSpec:
    """合成数据集规格"""

    input_dim: int = 32
    num_frames: int = 32
    num_planted: int = 4
    num_candidates: int = 5
    num_prototypes: int = 8
    noise: float = 0.5
    num_train: int = 2000
    num_test: int = 500
    seed: int = 0
    question_len: int = 8

    def validate(self) -> Tuple[bool, List[str]]:
        errors = []
        if self.input_dim < 2:
            errors.append(f"D_I 至少为2，当前值: {self.input_dim}")
        if self.num_frames < 1:
            errors.append(f"T 必须是正整数，当前值: {self.num_frames}")
        if not 1 <= self.num_planted <= self.num_frames:
            errors.append(f"K* 必须在 [1, T] 内，当前值: {self.num_planted}")
        if self.num_candidates < 2:
            errors.append(f"C 至少为2，当前值: {self.num_candidates}")
        if self.num_prototypes < 1:
            errors.append(f"干扰原型数至少为1，当前值: {self.num_prototypes}")
        if self.noise < 0:
            errors.append(f"eta 不能为负数，当前值: {self.noise}")
        if self.num_train < 0 or self.num_test < 0:
            errors.append("样本数量不能为负数")
        if self.question_len < 1:
            errors.append(f"L_q 至少为1，当前值: {self.question_len}")
        return len(errors) == 0, errors

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "SynthSpec":
        attrs = {f.name for f in fields(cls)}
        values = {}
        for key, value in raw.items():
            if key in SPEC_KEYS:
                values[SPEC_KEYS[key]] = value
            elif key in attrs:
                values[key] = value
            else:
                raise SpecError(f"未知的数据集规格项: {key}")
        spec = cls(**values)
        ok, errors = spec.validate()
        if not ok:
            raise SpecError("; ".join(errors))
        return spec

    @classmethod
    def from_json(cls, path: Optional[str]) -> "SynthSpec":
        if path is None:
            return cls.from_dict({})
        if not os.path.exists(path):
            raise SpecError(f"数据集规格文件不存在: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read().strip()
        try:
            raw = json.loads(text) if text else {}
        except json.JSONDecodeError as e:
            raise SpecError(f"数据集规格不是合法的 JSON: {e}") from e
        return cls.from_dict(raw)

    def to_json_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        return {key: values[attr] for key, attr in SPEC_KEYS.items()}


@dataclass(frozen=True)
class GroundTruth:
    """植入的关键帧时间戳（升序，从 1 开始）和答案下标"""

    timestamps: Tuple[int, ...]
    answer: int


@dataclass(frozen=True)
class SynthResult:
    """生成结果的文件路径"""

    train_manifest: str
    test_manifest: str
    ground_truth: str


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _draw_prototypes(rng: np.random.Generator, count: int, dim: int,
                     existing: Sequence[np.ndarray] = ()) -> List[np.ndarray]:
    """拒绝采样单位原型，保证与已有原型及彼此的余弦 < 0.3"""
    accepted: List[np.ndarray] = []
    rejections = 0
    while len(accepted) < count:
        candidate = _unit(rng.standard_normal(dim))
        if all(float(candidate @ other) < MAX_COSINE for other in list(existing) + accepted):
            accepted.append(candidate)
            continue
        rejections += 1
        if rejections >= MAX_REJECTIONS:
            raise SpecError(f"原型拒绝采样失败 {MAX_REJECTIONS} 次：C={count} 对 D_I={dim} 过大")
    return accepted


def _draw_question(rng: np.random.Generator, answer: np.ndarray,
                   pool: Sequence[np.ndarray]) -> np.ndarray:
    """问题原型：与答案原型正交，且与所有干扰原型的 |cos| < 0.3"""
    for _ in range(MAX_REJECTIONS):
        raw = rng.standard_normal(answer.shape[0])
        raw = raw - (raw @ answer) * answer
        norm = np.linalg.norm(raw)
        if norm == 0.0:
            continue
        candidate = raw / norm
        if all(abs(float(candidate @ other)) < MAX_COSINE for other in pool):
            return candidate
    raise SpecError(f"问题原型拒绝采样失败 {MAX_REJECTIONS} 次")


def _draw_timestamps(rng: np.random.Generator, T: int, k: int) -> Tuple[int, ...]:
    if rng.random() < CONTIGUOUS_PROBABILITY:
        start = int(rng.integers(1, T - k + 2))
        return tuple(range(start, start + k))
    return tuple(int(t) + 1 for t in np.sort(rng.choice(T, size=k, replace=False)))


def _noisy(rng: np.random.Generator, base: np.ndarray, noise: float) -> np.ndarray:
    # 每个坐标的噪声尺度为 η/√D_I，噪声范数约为 η
    dim = base.shape[0]
    return _unit(base + noise * rng.standard_normal(dim) / np.sqrt(dim))


def _generate_sample(spec: SynthSpec, pool: Sequence[np.ndarray], seed: int):
    rng = np.random.default_rng(seed)
    candidates = _draw_prototypes(rng, spec.num_candidates, spec.input_dim, existing=pool)
    answer = int(rng.integers(spec.num_candidates))
    planted = _draw_timestamps(rng, spec.num_frames, spec.num_planted)
    question_proto = _draw_question(rng, candidates[answer], pool)

    planted_set = set(planted)
    frames = np.empty((spec.num_frames, spec.input_dim))
    for t in range(1, spec.num_frames + 1):
        base = candidates[answer] if t in planted_set else pool[int(rng.integers(len(pool)))]
        frames[t - 1] = _noisy(rng, base, spec.noise)
    question = np.stack([_noisy(rng, question_proto, spec.noise) for _ in range(spec.question_len)])
    description = _unit(candidates[answer] + question_proto)
    tensors = {
        "frames": frames,
        "question": question,
        "description": description,
        "candidates": np.stack(candidates),
    }
    return tensors, GroundTruth(timestamps=planted, answer=answer)


def generate_dataset(spec: SynthSpec, out_dir: str, show_progress: bool = True) -> SynthResult:
    """
    生成合成数据集

    写出 tensors/ 下的 GCGT 文件、train_manifest.json、test_manifest.json、
    ground_truth.json 和 synth_spec.json；所有 JSON 键排序且不含时间戳。

    Raises:
        SpecError: 规格非法或原型拒绝采样失败
    """
    ok, errors = spec.validate()
    if not ok:
        raise SpecError("; ".join(errors))
    out_dir = os.path.abspath(out_dir)
    tensor_dir = ensure_dir(os.path.join(out_dir, "tensors"))
    pool = _draw_prototypes(np.random.default_rng(derive_seed(spec.seed, 0)),
                            spec.num_prototypes, spec.input_dim)

    truth: Dict[str, Dict[str, Any]] = {}
    manifests = {}
    for split_code, (split, count) in enumerate(zip(SPLITS, (spec.num_train, spec.num_test)), start=1):
        entries = []
        for index in tqdm(range(count), desc=f"生成 {split}", disable=not show_progress):
            sample_id = f"{split}-{index:05d}"
            tensors, gt = _generate_sample(spec, pool, derive_seed(spec.seed, split_code, index))
            entry: Dict[str, Any] = {"id": sample_id, "answer": gt.answer}
            for field_name, array in tensors.items():
                filename = f"{sample_id}_{field_name}.gcgt"
                write_tensor(array.astype(np.float32), os.path.join(tensor_dir, filename))
                entry[field_name] = f"tensors/{filename}"
            entries.append(entry)
            truth[sample_id] = {"timestamps": list(gt.timestamps), "answer": gt.answer}

        manifest = {
            "version": MANIFEST_VERSION,
            "T": spec.num_frames,
            "D_I": spec.input_dim,
            "C": spec.num_candidates,
            "L_q": spec.question_len,
            "samples": entries,
        }
        path = os.path.join(out_dir, f"{split}_manifest.json")
        atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        manifests[split] = path

    truth_path = os.path.join(out_dir, GROUND_TRUTH_FILE)
    atomic_write_text(truth_path, json.dumps(truth, indent=2, sort_keys=True) + "\n")
    atomic_write_text(os.path.join(out_dir, "synth_spec.json"),
                      json.dumps(spec.to_json_dict(), indent=2, sort_keys=True) + "\n")
    logger.info(f"合成数据集已生成: {out_dir} (训练 {spec.num_train}, 测试 {spec.num_test})")
    return SynthResult(train_manifest=manifests["train"], test_manifest=manifests["test"],
                       ground_truth=truth_path)


def load_ground_truth(path: str) -> Dict[str, GroundTruth]:
    """读取真实标注 sidecar：样本 id → GroundTruth"""
    if not os.path.exists(path):
        raise SpecError(f"真实标注文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return {
        sample_id: GroundTruth(timestamps=tuple(int(t) for t in entry["timestamps"]),
                               answer=int(entry["answer"]))
        for sample_id, entry in raw.items()
    }


@dataclass(frozen=True)
class OracleMetrics:
    """单个样本对评估指标的贡献"""

    recall: Optional[float]
    correct: bool
    center_error: Optional[float]


def keyframe_recall(selected: Sequence[int], planted: Sequence[int]) -> float:
    """|selected ∩ planted| / min(K, K*)"""
    denominator = min(len(selected), len(planted))
    if denominator == 0:
        return 0.0
    return len(set(selected) & set(planted)) / denominator


def center_error(mu: Sequence[float], planted: Sequence[int], num_frames: int) -> float:
    """每个中心到最近植入帧（归一化位置）的距离的均值"""
    targets = np.asarray(planted, dtype=np.float64) / num_frames
    return float(np.mean([np.min(np.abs(targets - m)) for m in mu]))


def oracle_metrics(selected: Sequence[int], truth: Optional[GroundTruth], logits: np.ndarray,
                   answer: int, mu: Optional[Sequence[float]] = None,
                   num_frames: Optional[int] = None) -> OracleMetrics:
    """
    评估单个样本

    没有真实标注时只给出答案正确性；答案取 argmax（并列取最小下标）。
    """
    correct = int(np.argmax(np.asarray(logits))) == int(answer)
    if truth is None:
        return OracleMetrics(recall=None, correct=correct, center_error=None)
    error = None
    if mu is not None and num_frames is not None:
        error = center_error(mu, truth.timestamps, num_frames)
    return OracleMetrics(recall=keyframe_recall(selected, truth.timestamps),
                         correct=correct, center_error=error)
