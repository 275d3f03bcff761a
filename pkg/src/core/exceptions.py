"""
异常定义模块

该模块集中定义应用程序的所有异常类型，包括：
- 数值计算和形状错误
- 张量文件格式错误
- 数据清单和配置校验错误
- 梯度校验失败

所有异常都继承自 GCGError，命令行入口只需捕获这一个根类型。

作者: GCG开发团队
版本: 1.0.0
"""

from typing import List, Optional


class GCGError(Exception):
    """应用程序异常根类型"""


class ShapeError(GCGError):
    """张量维度不匹配"""


class NumericError(GCGError):
    """运算结果出现非有限值"""


class InvalidMaskError(GCGError):
    """掩码把整行都屏蔽了"""


class ContractError(GCGError):
    """调用方违反了操作的前置条件"""


class FormatError(GCGError):
    """张量文件格式错误（魔数、版本或精度代码不对）"""


class LengthError(GCGError):
    """张量文件被截断或长度与头部声明不符"""


class UnsupportedError(GCGError):
    """不支持的张量（例如秩超过上限）"""


class ManifestError(GCGError):
    """数据清单内容错误"""


class ManifestNotFoundError(ManifestError, FileNotFoundError):
    """数据清单或其引用的文件不存在"""


class ExtentMismatchError(ManifestError):
    """清单记录的张量维度与清单声明不一致"""

    def __init__(self, sample_id: str, field: str, detail: str):
        self.sample_id = sample_id
        self.field = field
        super().__init__(f"样本 {sample_id} 的字段 {field} 维度不匹配: {detail}")


class ConfigValidationError(GCGError):
    """运行配置校验失败"""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("配置校验失败: " + "; ".join(self.errors))


class ConfigurationError(GCGError):
    """运行时发现的配置组合错误（例如单样本批次却要求跨视频负样本）"""


class DegenerateInputError(GCGError):
    """零范数向量无法计算余弦相似度"""

    def __init__(self, message: str, frame_index: Optional[int] = None):
        self.frame_index = frame_index
        super().__init__(message)


class CapacityError(GCGError):
    """帧数超过位置编码表容量"""


class SpecError(GCGError):
    """合成数据规格无法满足"""


class GradientCheckError(GCGError):
    """梯度校验未通过"""

    def __init__(self, failed: List[str]):
        self.failed = list(failed)
        super().__init__("梯度校验失败: " + ", ".join(self.failed))
