"""
Core - 关系姿态适配核心模块

包含姿态几何、合成世界、潜空间模型、关系网络与对齐训练
子模块依赖 torch, 按需导入
"""

from . import errors, models

__all__ = ["errors", "models"]
