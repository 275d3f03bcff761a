"""
优化器模块

该模块负责可学习参数的存储和更新，包括：
- 命名参数、梯度缓冲和 Adam 一阶/二阶矩
- 解耦权重衰减的 AdamW 更新
- 参数快照（用于检查点和不变性校验）

主要类：
- ParamStore: 命名参数仓库
- adamw_step: 一次 AdamW 更新
- clip_grad_norm: 全局梯度范数裁剪

作者: GCG开发团队
版本: 1.0.0
"""

import hashlib
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .config import Config
from .exceptions import ContractError, ShapeError
from .numerics import Tensor, default_dtype


class ParamStore:
    """
    命名参数仓库

    参数按注册顺序保存，梯度和矩缓冲的维度始终与参数一致。
    一个训练步独占整个仓库。
    """

    def __init__(self, dtype: Optional[np.dtype] = None):
        self.dtype = np.dtype(dtype or default_dtype())
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        """注册一个参数并返回其张量"""
        if name in self._params:
            raise ContractError(f"参数重名: {name}")
        tensor = Tensor(value, requires_grad=True, name=name, dtype=self.dtype)
        self._params[name] = tensor
        self.first_moment[name] = np.zeros_like(tensor.data)
        self.second_moment[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def grad_of(self, name: str) -> np.ndarray:
        """取梯度，未被触达的参数视为零梯度"""
        param = self._params[name]
        return param.grad if param.grad is not None else np.zeros_like(param.data)

    def load_state(self, values: Dict[str, np.ndarray], first: Dict[str, np.ndarray],
                   second: Dict[str, np.ndarray], step: int) -> None:
        """从检查点恢复参数、矩和步数"""
        for name, param in self._params.items():
            for source, label in ((values, "参数"), (first, "一阶矩"), (second, "二阶矩")):
                if name not in source:
                    raise ContractError(f"检查点缺少{label}: {name}")
                if source[name].shape != param.shape:
                    raise ShapeError(f"检查点{label} {name} 维度 {source[name].shape} 与参数 {param.shape} 不一致")
            param.data = np.array(values[name], dtype=self.dtype)
            self.first_moment[name] = np.array(first[name], dtype=self.dtype)
            self.second_moment[name] = np.array(second[name], dtype=self.dtype)
        if step < 0:
            raise ContractError(f"步数不能为负: {step}")
        self.step = int(step)

    def digest(self) -> str:
        """参数和步数的 SHA-256 摘要"""
        h = hashlib.sha256()
        for name, param in self._params.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(param.data).tobytes())
        h.update(str(self.step).encode("ascii"))
        return h.hexdigest()


def adamw_step(store: ParamStore, lr: float, beta1: float = Config.ADAM_BETA1,
               beta2: float = Config.ADAM_BETA2, eps: float = Config.ADAM_EPS,
               weight_decay: float = Config.WEIGHT_DECAY) -> ParamStore:
    """
    一次 AdamW 更新

    先做解耦权重衰减 θ ← θ − lr·wd·θ，再用偏差校正后的矩更新；步数加一。
    未被触达的参数按零梯度处理。
    """
    store.step += 1
    t = store.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, param in store:
        grad = store.grad_of(name)
        theta = param.data
        if weight_decay:
            theta = theta - lr * weight_decay * theta
        m = beta1 * store.first_moment[name] + (1.0 - beta1) * grad
        v = beta2 * store.second_moment[name] + (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        param.data = theta.astype(store.dtype, copy=False)
        store.first_moment[name] = m.astype(store.dtype, copy=False)
        store.second_moment[name] = v.astype(store.dtype, copy=False)
    return store


def grad_norm(store: ParamStore, prefix: Optional[str] = None) -> float:
    """全局梯度 L2 范数；给出 prefix 时只统计名称以它开头的参数"""
    total = 0.0
    for name, _ in store:
        if prefix is None or name.startswith(prefix):
            grad = store.grad_of(name)
            total += float(np.sum(grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """
    按全局范数等比缩放梯度，使其不超过 max_norm

    max_norm 为 0 时不裁剪。返回裁剪前的范数。
    """
    norm = grad_norm(store)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for _, param in store:
            if param.grad is not None:
                param.grad = (param.grad * factor).astype(param.grad.dtype, copy=False)
    return norm
