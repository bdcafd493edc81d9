"""
Errors - 异常定义

所有库函数抛出的异常都继承自 RelPoseError，携带 error_code（供工具层返回状态字典）
和 exit_code（供命令行映射退出码）。
"""

from typing import Any, Optional


class RelPoseError(Exception):
    """项目异常基类"""

    error_code: str = "RELPOSE_ERROR"
    exit_code: int = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict:
        """转换为工具层使用的错误状态字典"""
        return {
            "status": "error",
            "message": self.message,
            "error_code": self.error_code,
        }


class ShapeError(RelPoseError, ValueError):
    """数组形状不符合约定 (关节数、图像尺寸、形状不匹配)"""

    error_code = "INVALID_SHAPE"


class LengthError(ShapeError):
    """序列长度不符合约定"""

    error_code = "INVALID_LENGTH"


class AlignmentDegenerateError(RelPoseError, ValueError):
    """Procrustes 对齐退化 (关节共线或重合)"""

    error_code = "ALIGNMENT_DEGENERATE"


class RenderError(RelPoseError):
    """姿态超出画面"""

    error_code = "RENDER_OUT_OF_FRAME"


class SplitError(RelPoseError):
    """源域与目标域数据划分重叠"""

    error_code = "SPLIT_OVERLAP"


class ConfigError(RelPoseError):
    """配置错误"""

    error_code = "INVALID_CONFIG"
    exit_code = 2


class UnknownRuleError(ConfigError, KeyError):
    """未注册的关系规则"""

    error_code = "UNKNOWN_RULE"

    def __str__(self) -> str:
        return self.message


class StageOrderError(RelPoseError):
    """阶段顺序错误，例如在关系网络训练前执行适配"""

    error_code = "STAGE_ORDER"
    exit_code = 3


class TrainingFailureError(RelPoseError):
    """训练发散 (NaN 或损失长期不下降)"""

    error_code = "TRAINING_FAILED"
    exit_code = 4

    def __init__(self, message: str, log: Optional[Any] = None, **details: Any):
        super().__init__(message, **details)
        self.log = log


class RelationUnlearnableError(TrainingFailureError):
    """关系网络验证误差超过上限"""

    error_code = "RELATION_UNLEARNABLE"


class FrozenViolationError(RelPoseError):
    """冻结组件的参数校验和发生变化"""

    error_code = "FROZEN_VIOLATION"
    exit_code = 4


class SealedDataError(RelPoseError):
    """密封真值缺失或被非评估路径访问"""

    error_code = "SEALED_GT"


class CheckpointError(RelPoseError):
    """检查点缺失或损坏"""

    error_code = "CHECKPOINT_INVALID"
