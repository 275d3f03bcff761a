"""
高斯生成器模块

该模块负责从帧嵌入和问题嵌入预测 K 个高斯时间掩码，包括：
- 跨模态嵌入：投影到 D_G，加模态类型向量；视觉行另加位置编码
- 预归一化 Transformer 编码器（多头注意力 + GELU 前馈），只保留前 T 行
- 单查询注意力池化，全连接头经 Sigmoid 得到中心 μ ∈ (0,1)^K
- 高斯掩码 g_k(t) 和最小-最大归一化后的帧权重分布 p

主要类：
- GrounderParams: 生成器参数（注册在 ParamStore 中）
- GaussianMasks: 中心和掩码
- GaussianGenerator: 前向计算的封装

作者: GCG开发团队
版本: 1.0.0
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .config import Config, RunConfig
from .exceptions import CapacityError, ContractError, ShapeError
from .numerics import Tensor
from .optimizer import ParamStore

PREFIX = "grounder"


@dataclass
class EncoderLayer:
    """一层预归一化编码器的参数"""

    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff1_weight: Tensor
    ff1_bias: Tensor
    ff2_weight: Tensor
    ff2_bias: Tensor


@dataclass
class GrounderParams:
    """
    高斯生成器参数

    所有张量都注册在同一个 ParamStore 中（名称以 ``grounder.`` 开头），
    这里只保存引用，便于前向计算按字段访问。
    """

    input_dim: int
    hidden_dim: int
    num_heads: int
    num_select: int
    proj: Tensor
    type_visual: Tensor
    type_text: Tensor
    positional: Tensor
    layers: List[EncoderLayer]
    pool_query: Tensor
    head_norm_gain: Tensor
    head_norm_bias: Tensor
    head_weight: Tensor
    head_bias: Tensor

    @property
    def max_frames(self) -> int:
        return self.positional.shape[0]

    @classmethod
    def create(cls, store: ParamStore, config: RunConfig,
               rng: np.random.Generator) -> "GrounderParams":
        """
        按配置初始化参数并注册到 store

        线性层权重 ~ N(0, 1/fan_in)，类型向量 ~ N(0, 0.02²)；
        位置表以正弦编码初始化（仍可学习）；
        中心头偏置取 logit((k+0.5)/K)，使初始中心在视频上均匀分布。
        """
        D_I, D_G, K = config.input_dim, config.hidden_dim, config.num_select
        if D_G % config.num_heads:
            raise ContractError(f"D_G={D_G} 不能被 heads={config.num_heads} 整除")

        def linear(name: str, fan_in: int, fan_out: int) -> Tensor:
            return store.add(f"{PREFIX}.{name}", rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))

        def vector(name: str, value: np.ndarray) -> Tensor:
            return store.add(f"{PREFIX}.{name}", value)

        proj = linear("proj.weight", D_I, D_G)
        type_visual = vector("type.visual", rng.normal(0.0, 0.02, D_G))
        type_text = vector("type.text", rng.normal(0.0, 0.02, D_G))
        positional = vector("positional", Config.POSITIONAL_INIT_SCALE * sinusoidal_table(Config.T_MAX, D_G))

        layers = []
        for i in range(config.num_layers):
            p = f"layer{i}"
            layers.append(EncoderLayer(
                ln1_gain=vector(f"{p}.ln1.gain", np.ones(D_G)),
                ln1_bias=vector(f"{p}.ln1.bias", np.zeros(D_G)),
                wq=linear(f"{p}.attn.wq", D_G, D_G),
                bq=vector(f"{p}.attn.bq", np.zeros(D_G)),
                wk=linear(f"{p}.attn.wk", D_G, D_G),
                bk=vector(f"{p}.attn.bk", np.zeros(D_G)),
                wv=linear(f"{p}.attn.wv", D_G, D_G),
                bv=vector(f"{p}.attn.bv", np.zeros(D_G)),
                wo=linear(f"{p}.attn.wo", D_G, D_G),
                bo=vector(f"{p}.attn.bo", np.zeros(D_G)),
                ln2_gain=vector(f"{p}.ln2.gain", np.ones(D_G)),
                ln2_bias=vector(f"{p}.ln2.bias", np.zeros(D_G)),
                ff1_weight=linear(f"{p}.ff1.weight", D_G, 4 * D_G),
                ff1_bias=vector(f"{p}.ff1.bias", np.zeros(4 * D_G)),
                ff2_weight=linear(f"{p}.ff2.weight", 4 * D_G, D_G),
                ff2_bias=vector(f"{p}.ff2.bias", np.zeros(D_G)),
            ))

        pool_query = vector("pool.query", rng.normal(0.0, 1.0 / math.sqrt(D_G), D_G))
        head_norm_gain = vector("head.norm.gain", np.ones(D_G))
        head_norm_bias = vector("head.norm.bias", np.zeros(D_G))
        head_weight = vector("head.weight", rng.normal(0.0, 0.02, (D_G, K)))
        centers = (np.arange(K) + 0.5) / K
        head_bias = vector("head.bias", np.log(centers / (1.0 - centers)))

        return cls(input_dim=D_I, hidden_dim=D_G, num_heads=config.num_heads, num_select=K,
                   proj=proj, type_visual=type_visual, type_text=type_text,
                   positional=positional, layers=layers, pool_query=pool_query,
                   head_norm_gain=head_norm_gain, head_norm_bias=head_norm_bias,
                   head_weight=head_weight, head_bias=head_bias)


def sinusoidal_table(rows: int, width: int) -> np.ndarray:
    """正弦位置编码：偶数列 sin，奇数列 cos，频率按 10000^(−2i/width) 递减"""
    position = np.arange(rows, dtype=np.float64)[:, None]
    div_term = np.exp(np.arange(0, width, 2, dtype=np.float64) * -(math.log(10000.0) / width))
    table = np.zeros((rows, width))
    table[:, 0::2] = np.sin(position * div_term)
    table[:, 1::2] = np.cos(position * div_term[:width // 2])
    return table


@dataclass
class GaussianMasks:
    """K 个高斯中心及其在 T 帧上的掩码"""

    mu: Tensor
    g: Tensor

    @property
    def num_frames(self) -> int:
        return self.g.shape[1]


def _key_mask(T: int, mask: Optional[np.ndarray], L_q: int) -> np.ndarray:
    text = np.ones(L_q, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if text.shape[0] != L_q:
        raise ShapeError(f"问题掩码长度 {text.shape[0]} 与问题长度 {L_q} 不一致")
    return np.concatenate([np.ones(T, dtype=bool), text])


def embed_inputs(frames: nx.ArrayLike, question: nx.ArrayLike, mask: Optional[np.ndarray],
                 params: GrounderParams) -> Tensor:
    """
    跨模态嵌入 [frames; question] → (T+L_q)×D_G

    视觉行加视觉类型向量和按帧序号的位置编码，文本行只加文本类型向量。

    Raises:
        CapacityError: T 超过位置编码表容量
    """
    frames = nx.as_tensor(frames, dtype=params.proj.dtype)
    question = nx.as_tensor(question, dtype=params.proj.dtype)
    T, L_q = frames.shape[0], question.shape[0]
    if T > params.max_frames:
        raise CapacityError(f"T={T} 超过位置编码容量 {params.max_frames}")
    if L_q < 1:
        raise ContractError("问题至少需要一个词")
    _key_mask(T, mask, L_q)

    stacked = nx.concat([frames, question], axis=0)
    projected = nx.matmul(stacked, params.proj)
    visual = nx.add(params.positional[:T], params.type_visual)
    text = nx.add(nx.as_tensor(np.zeros((L_q, params.hidden_dim)), dtype=params.proj.dtype), params.type_text)
    return nx.add(projected, nx.concat([visual, text], axis=0))


def _attention(x: Tensor, layer: EncoderLayer, key_mask: np.ndarray, num_heads: int) -> Tensor:
    D_G = x.shape[1]
    head_dim = D_G // num_heads
    q = nx.add_bias(nx.matmul(x, layer.wq), layer.bq)
    k = nx.add_bias(nx.matmul(x, layer.wk), layer.bk)
    v = nx.add_bias(nx.matmul(x, layer.wv), layer.bv)
    heads = []
    for h in range(num_heads):
        cols = (slice(None), slice(h * head_dim, (h + 1) * head_dim))
        scores = nx.scale(nx.matmul(q[cols], nx.transpose(k[cols])), 1.0 / math.sqrt(head_dim))
        weights = nx.softmax_rows(scores, key_mask[None, :])
        heads.append(nx.matmul(weights, v[cols]))
    merged = heads[0] if num_heads == 1 else nx.concat(heads, axis=1)
    return nx.add_bias(nx.matmul(merged, layer.wo), layer.bo)


def _feed_forward(x: Tensor, layer: EncoderLayer) -> Tensor:
    hidden = nx.gelu(nx.add_bias(nx.matmul(x, layer.ff1_weight), layer.ff1_bias))
    return nx.add_bias(nx.matmul(hidden, layer.ff2_weight), layer.ff2_bias)


def encode(embedded: Tensor, mask: Optional[np.ndarray], params: GrounderParams,
           num_frames: int) -> Tensor:
    """
    预归一化 Transformer 编码器，输出前 T 行

    被掩码的问题位置在注意力中权重为零；N=0 时原样返回前 T 行。
    """
    L_q = embedded.shape[0] - num_frames
    key_mask = _key_mask(num_frames, mask, L_q)
    x = embedded
    for layer in params.layers:
        x = nx.add(x, _attention(nx.layer_norm(x, layer.ln1_gain, layer.ln1_bias),
                                 layer, key_mask, params.num_heads))
        x = nx.add(x, _feed_forward(nx.layer_norm(x, layer.ln2_gain, layer.ln2_bias), layer))
    return x[:num_frames]


def pool_and_predict_centers(encoded: Tensor, params: GrounderParams) -> Tensor:
    """
    注意力池化后预测 K 个中心

    权重 = softmax_t(⟨query, M̂_t⟩/√D_G)，G = Σ_t 权重·M̂_t，μ = sigmoid(LN(G)·W + b)。
    G 先做层归一化，中心头的输入尺度不随编码器残差流增长。
    """
    T, D_G = encoded.shape
    query = nx.reshape(params.pool_query, (D_G, 1))
    scores = nx.scale(nx.reshape(nx.matmul(encoded, query), (1, T)), 1.0 / math.sqrt(D_G))
    pooled = nx.matmul(nx.softmax_rows(scores), encoded)
    summary = nx.layer_norm(pooled, params.head_norm_gain, params.head_norm_bias)
    logits = nx.add_bias(nx.matmul(summary, params.head_weight), params.head_bias)
    return nx.reshape(nx.sigmoid(logits), (params.num_select,))


def frame_positions(T: int, dtype: np.dtype) -> np.ndarray:
    """归一化帧位置 t/T，t = 1…T"""
    return (np.arange(1, T + 1, dtype=np.float64) / T).astype(dtype)


def gaussian_masks(mu: Tensor, sigma: float, T: int) -> GaussianMasks:
    """
    高斯掩码 g_k(t) = exp(−(t/T − μ_k)²/(2σ²)) / (√(2π)σ)

    σ 在所有掩码间共享；对 μ 可导。
    """
    if sigma <= 0:
        raise ContractError(f"sigma 必须大于0，当前值: {sigma}")
    K = mu.shape[0]
    diff = nx.sub(nx.as_tensor(frame_positions(T, mu.dtype)[None, :], dtype=mu.dtype), nx.reshape(mu, (K, 1)))
    exponent = nx.scale(nx.mul(diff, diff), -1.0 / (2.0 * sigma * sigma))
    g = nx.scale(nx.exp(exponent), 1.0 / (math.sqrt(2.0 * math.pi) * sigma))
    return GaussianMasks(mu=mu, g=g)


def combine_masks(masks: GaussianMasks) -> Tensor:
    """
    合并为帧权重分布 p = (raw − min)/(max − min)，raw_t = Σ_k g_k(t)

    max − min 小于 1e-12 时所有帧取 0.5（此时不回传梯度）。
    """
    raw = nx.reduce_sum(masks.g, axis=0)
    high = nx.reduce_max(raw)
    low = nx.reduce_min(raw)
    spread = nx.sub(high, low)
    if spread.item() < Config.DEGENERATE_RANGE:
        return nx.as_tensor(np.full(raw.shape, 0.5, dtype=raw.dtype))
    return nx.div(nx.sub(raw, low), spread)


@dataclass
class GrounderOutput:
    """一次前向计算的结果"""

    encoded: Tensor
    masks: GaussianMasks
    p: Tensor

    @property
    def mu(self) -> Tensor:
        return self.masks.mu


class GaussianGenerator:
    """
    高斯生成器

    对单个样本执行 embed → encode → pool → masks → combine。
    多个样本可以基于同一份只读参数并发前向。
    """

    def __init__(self, params: GrounderParams, sigma: float):
        self.params = params
        self.sigma = sigma

    def forward(self, frames: nx.ArrayLike, question: nx.ArrayLike,
                mask: Optional[np.ndarray] = None) -> GrounderOutput:
        frames = nx.as_tensor(frames, dtype=self.params.proj.dtype)
        T = frames.shape[0]
        embedded = embed_inputs(frames, question, mask, self.params)
        encoded = encode(embedded, mask, self.params, T)
        mu = pool_and_predict_centers(encoded, self.params)
        masks = gaussian_masks(mu, self.sigma, T)
        return GrounderOutput(encoded=encoded, masks=masks, p=combine_masks(masks))

    __call__ = forward


def nearest_frames(mu: Sequence[float], T: int) -> List[int]:
    """每个中心最近的帧（从 1 开始）"""
    positions = np.arange(1, T + 1) / T
    return [int(np.argmin(np.abs(positions - m))) + 1 for m in mu]
