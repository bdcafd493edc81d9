"""
Tools - 流水线与 MCP 工具模块

包含阶段编排、评估与消融、图表生成和只读的报告查询工具
"""

from . import evaluation_tools
from . import pipeline_tools
from . import plot_tools
from . import report_tools

__all__ = [
    "evaluation_tools",
    "pipeline_tools",
    "plot_tools",
    "report_tools",
]
