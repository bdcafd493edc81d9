"""
Validators - 数据验证工具

提供阶段名、产物目录、姿态与图像数组等验证功能
"""

import re
from pathlib import Path
from typing import Any, List, Tuple, Union

import numpy as np

STAGES = (
    "gen-data", "train-pose-aae", "train-motion-aae", "train-source",
    "rank-relations", "train-relations", "adapt", "evaluate", "ablation", "relation-sweep",
)
DOMAINS = ("source", "target", "unseen")
ARTIFACT_DIRS = ("checkpoints", "data", "reports", "plots")


def validate_stage_name(stage: str) -> bool:
    """
    验证阶段名称

    Args:
        stage: 阶段名称, 例如 train-pose-aae

    Returns:
        bool: 是否有效
    """
    return stage in STAGES


def validate_domain(domain: str) -> bool:
    """验证评估域名称 (source / target / unseen)"""
    return domain in DOMAINS


def validate_rule_name(name: str) -> bool:
    """
    验证关系规则名称格式

    Args:
        name: 规则名称, 例如 pose-flip、flip+inplane-15、slow-backward

    Returns:
        bool: 格式是否有效 (是否注册由 relation_nets.get_rule 判断)
    """
    pattern = r'^[a-z]+([+-][a-z]+)*(-\-?\d+(\.\d+)?)?(-backward)?$'
    return bool(re.match(pattern, name))


def validate_artifact_dir(path: Union[str, Path]) -> Tuple[bool, List[str]]:
    """
    验证产物目录结构

    Args:
        path: --out 目录

    Returns:
        Tuple[bool, List[str]]: (是否有效, 错误信息列表)
    """
    errors = []
    root = Path(path)
    if not root.exists():
        errors.append(f"产物目录不存在: {root}")
        return False, errors
    for name in ARTIFACT_DIRS:
        if not (root / name).is_dir():
            errors.append(f"缺少子目录: {name}")
    return len(errors) == 0, errors


def validate_pose_array(y: Any) -> Tuple[bool, List[str]]:
    """
    验证姿态数组: 形状 (..., 17, 3)、坐标有限、根关节在原点

    Returns:
        Tuple[bool, List[str]]: (是否有效, 错误信息列表)
    """
    errors = []
    try:
        array = np.asarray(y, dtype=np.float64)
    except (TypeError, ValueError):
        return False, ["无法转换为数值数组"]

    if array.ndim < 2 or array.shape[-2:] != (17, 3):
        errors.append(f"形状必须以 (17, 3) 结尾: {array.shape}")
        return False, errors
    if not np.isfinite(array).all():
        errors.append("存在非有限坐标")
    elif np.abs(array[..., 0, :]).max() > 1e-6:
        errors.append("根关节不在原点")
    return len(errors) == 0, errors


def validate_image_array(x: Any, size: int = 64) -> Tuple[bool, List[str]]:
    """验证图像数组: uint8, 形状 (..., size, size, 3)"""
    errors = []
    array = np.asarray(x)
    if array.dtype != np.uint8:
        errors.append(f"图像必须为 uint8: {array.dtype}")
    if array.ndim < 3 or array.shape[-3:] != (size, size, 3):
        errors.append(f"图像形状必须以 ({size}, {size}, 3) 结尾: {array.shape}")
    return len(errors) == 0, errors


def sanitize_input(input_str: str) -> str:
    """
    清理输入字符串

    Args:
        input_str: 输入字符串

    Returns:
        str: 清理后的字符串
    """
    if not isinstance(input_str, str):
        return str(input_str)

    cleaned = input_str.strip()
    cleaned = re.sub(r'[<>"\'`;|&$]', '', cleaned)
    return cleaned
