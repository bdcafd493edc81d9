"""
Utils - 工具函数模块

包含数据验证、运行时设置、检查点与数据集读写、梯度检查等实用工具
"""

from . import validators, runtime

__all__ = ["validators", "runtime"]
