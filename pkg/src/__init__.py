"""
GCG-Grounding - 视频问答关键帧定位工具

基于高斯掩码的对比式定位：在冻结的帧嵌入序列上学习多个高斯时间掩码，
由伪标签、描述-片段对比目标和答案损失联合监督，并通过可微 Top-K 选帧。

作者: GCG开发团队
版本号: 1.0.0
"""

__version__ = "1.0.0"
__author__ = "GCG开发团队"

# 不在此处导入子模块，避免循环导入
__all__ = ["__version__", "__author__"]
