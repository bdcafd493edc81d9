"""
Report Tools - 实验产物查询工具

面向 MCP 服务器的只读工具: 骨架描述、实验报告、潜空间距离、阶段评估与流水线状态。
每个工具返回带 status 字段的字典, 异常转换为 error 状态。
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from ..core.errors import RelPoseError
from ..core.pose_geometry import BONES, FRAME_RATE, JOINT_NAMES, SEQ_LEN, SKELETON
from ..utils.validators import sanitize_input, validate_artifact_dir, validate_domain
from .evaluation_tools import evaluate, evaluate_source
from .pipeline_tools import ArtifactStore, pipeline_status, read_report

logger = logging.getLogger(__name__)

ENCODER_CHECKPOINTS = {"source": "source_encoder", "adapt": "adapted_encoder"}


def _out_dir(out_dir: Optional[str]) -> Path:
    return Path(sanitize_input(out_dir) if out_dir else os.getenv("RELPOSE_OUT_DIR", "out"))


def _error(message: str, error_code: str) -> Dict[str, Any]:
    return {"status": "error", "message": message, "error_code": error_code}


def _failure(action: str, e: Exception) -> Dict[str, Any]:
    logger.error(f"{action}失败: {str(e)}", exc_info=True)
    code = e.error_code if isinstance(e, RelPoseError) else "INTERNAL_ERROR"
    return _error(f"{action}失败: {str(e)}", code)


def describeSkeleton() -> Dict[str, Any]:
    """
    骨架描述工具

    Returns:
        Dict[str, Any]: 关节名称、父节点、左右对称对与骨长
    """
    try:
        result = {
            "status": "success",
            "skeleton": json.loads(SKELETON.model_dump_json()),
            "joint_names": list(JOINT_NAMES),
            "bones": [list(bone) for bone in BONES],
            "seq_len": SEQ_LEN,
            "frame_rate": FRAME_RATE,
        }
        logger.info("骨架描述查询成功")
        return result
    except Exception as e:
        return _failure("骨架描述查询", e)


def getExperimentReport(out_dir: Optional[str] = None) -> Dict[str, Any]:
    """
    实验报告查询工具

    Args:
        out_dir: 产物目录, 默认读取环境变量 RELPOSE_OUT_DIR

    Returns:
        Dict[str, Any]: 报告内容
    """
    try:
        root = _out_dir(out_dir)
        ok, errors = validate_artifact_dir(root)
        if not ok:
            return _error(f"产物目录无效: {errors}", "INVALID_OUT_DIR")
        report = read_report(root / "reports" / "report.json")
        logger.info(f"实验报告查询成功: {root}")
        return {"status": "success", "report": report.model_dump(mode="json")}
    except Exception as e:
        return _failure("实验报告查询", e)


def getLatentDistances(out_dir: Optional[str] = None, space: Optional[str] = None) -> Dict[str, Any]:
    """
    潜空间距离查询工具

    Args:
        out_dir: 产物目录
        space: pose 或 motion, 为空时返回全部

    Returns:
        Dict[str, Any]: 距离表、排序与选中的规则
    """
    try:
        if space is not None and space not in ("pose", "motion"):
            return _error(f"空间必须为 pose 或 motion: {space}", "INVALID_SPACE")
        report = read_report(_out_dir(out_dir) / "reports" / "report.json")
        rows = [row.model_dump() for row in report.latent_distances if space is None or row.space == space]
        if not rows:
            return _error("报告中没有潜空间距离, 请先执行 rank-relations", "NO_LATENT_DISTANCES")
        return {
            "status": "success",
            "latent_distances": rows,
            "ranking": report.ranking,
            "selected_rules": report.selected_rules,
        }
    except Exception as e:
        return _failure("潜空间距离查询", e)


def evaluateStage(stage: str = "adapt", domain: str = "target", out_dir: Optional[str] = None) -> Dict[str, Any]:
    """
    阶段评估工具 - 用 G^s (source) 或适配后的 G (adapt) 在指定域上重新评估

    Args:
        stage: source 或 adapt
        domain: source / target / unseen
        out_dir: 产物目录

    Returns:
        Dict[str, Any]: MPJPE / PA-MPJPE / PCK / AUC
    """
    try:
        stage, domain = sanitize_input(stage), sanitize_input(domain)
        if stage not in ENCODER_CHECKPOINTS:
            return _error(f"阶段必须为 source 或 adapt: {stage}", "INVALID_STAGE")
        if not validate_domain(domain):
            return _error(f"未知评估域: {domain}", "INVALID_DOMAIN")
        store = ArtifactStore(_out_dir(out_dir))
        G = store.encoder(ENCODER_CHECKPOINTS[stage])
        pose_coder = store.pose_coder()
        if domain == "source":
            metrics = evaluate_source(G, pose_coder, store.source_set())
        else:
            dataset = store.target_set() if domain == "target" else store.unseen_set()
            if dataset is None:
                return _error("配置中没有未见域风格", "NO_UNSEEN_DOMAIN")
            metrics = evaluate(G, pose_coder, dataset)
        logger.info(f"阶段评估成功: {stage}/{domain} MPJPE={metrics.mpjpe:.2f}mm")
        return {"status": "success", "stage": stage, "domain": domain, "metrics": metrics.model_dump()}
    except Exception as e:
        return _failure("阶段评估", e)


def getPipelineStatus(out_dir: Optional[str] = None) -> Dict[str, Any]:
    """
    流水线状态查询工具

    Returns:
        Dict[str, Any]: 已完成阶段、下一阶段与检查点完整性
    """
    try:
        status = pipeline_status(_out_dir(out_dir))
        return {"status": "success", **status}
    except Exception as e:
        return _failure("流水线状态查询", e)
