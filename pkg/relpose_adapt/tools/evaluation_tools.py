"""
Evaluation Tools - 评估与消融工具

evaluate 是唯一打开目标域密封真值的入口; 其余代码只接触无标签片段。
"""

import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ..core.alignment import FrozenComponents, ImageEncoder, adapt_target, predict_poses
from ..core.config import AdaptConfig, EvalConfig, RelationsConfig
from ..core.errors import ConfigError, SealedDataError
from ..core.latent_models import MotionCoder, PoseCoder, decode_pose, encode_pose
from ..core.models import AblationRow, MetricReport, RelationSweepRow
from ..core.pose_geometry import N_JOINTS, evaluate_poses
from ..core.relation_nets import get_rule, latent_distance, train_relation
from ..core.synth_world import LabeledSourceSet, TargetVideoSet, UnpairedPoseBank

logger = logging.getLogger(__name__)

SOURCE_ONLY = "source-only"


def evaluate_predictions(preds: np.ndarray, gts: np.ndarray,
                         config: Optional[EvalConfig] = None) -> MetricReport:
    """按评估配置的阈值汇总 MPJPE / PA-MPJPE / PCK / AUC"""
    config = config or EvalConfig()
    return evaluate_poses(preds, gts, pck_threshold=config.pck_threshold, n_thresholds=config.n_thresholds)


def evaluate(
    G: Optional[ImageEncoder],
    pose_coder: PoseCoder,
    target_set: TargetVideoSet,
    config: Optional[EvalConfig] = None,
) -> MetricReport:
    """
    在目标域片段上逐帧推理并与密封真值比较

    Args:
        G: 图像编码器; None 时走真值短路 D_p∘E_p(y), 用于核对重建误差
        pose_coder: 冻结的 PoseCoder
        target_set: 带密封真值的目标域视频
        config: 评估配置

    Returns:
        MetricReport: 目标域指标

    Raises:
        SealedDataError: 缺少密封真值
    """
    sealed = getattr(target_set, "sealed_gt", None)
    if sealed is None:
        raise SealedDataError("目标域数据集没有密封真值, 无法评估")
    long_gt = sealed.unseal()
    q, double_t = long_gt.shape[:2]
    clips = target_set.clips
    gts = long_gt.reshape((q * 2, double_t // 2, N_JOINTS, 3))
    if gts.shape[:2] != clips.shape[:2]:
        raise SealedDataError(f"密封真值与片段形状不符: {gts.shape[:2]} vs {clips.shape[:2]}")

    if G is None:
        preds = decode_pose(pose_coder, encode_pose(pose_coder, gts))
        logger.info("使用真值短路评估 (D_p∘E_p)")
    else:
        preds = predict_poses(G, pose_coder, clips)
    report = evaluate_predictions(preds, gts, config)
    logger.info(f"目标域评估: MPJPE={report.mpjpe:.2f}mm, PA-MPJPE={report.pa_mpjpe:.2f}mm, "
                f"PCK={report.pck:.1f}%, AUC={report.auc:.1f}%")
    return report


def evaluate_source(G: ImageEncoder, pose_coder: PoseCoder, source_set: LabeledSourceSet,
                    config: Optional[EvalConfig] = None) -> MetricReport:
    """源域验证序列上的指标 (验证集为空时使用全部样本)"""
    index = source_set.val_indices()
    if len(index) == 0:
        index = np.arange(len(source_set))
    preds = predict_poses(G, pose_coder, source_set.images[index])
    return evaluate_predictions(preds, source_set.poses[index], config)


def stage_label(energies: Sequence[str]) -> str:
    """消融行名称: 空集合为 source-only, 否则为 LCR+HCR+..."""
    return "+".join(energies) if energies else SOURCE_ONLY


def ablation_rows(
    G_source: ImageEncoder,
    pose_coder: PoseCoder,
    target_set: TargetVideoSet,
    frozen: FrozenComponents,
    adapt_config: AdaptConfig,
    eval_config: EvalConfig,
) -> List[AblationRow]:
    """
    按累积能量集合与种子逐个适配并评估

    空能量集合即 G^s 本身, 只评估一次, 每个种子记录同一结果。
    """
    rows: List[AblationRow] = []
    baseline: Optional[MetricReport] = None
    for energies in eval_config.ablation_stages:
        label = stage_label(energies)
        for seed in eval_config.ablation_seeds:
            if not energies:
                if baseline is None:
                    baseline = evaluate(G_source, pose_coder, target_set, eval_config)
                report = baseline
            else:
                result = adapt_target(G_source, target_set, frozen, adapt_config, energies=energies, seed=seed)
                report = evaluate(result.encoder, pose_coder, target_set, eval_config)
            rows.append(AblationRow(stage=label, seed=seed, mpjpe=report.mpjpe, pa_mpjpe=report.pa_mpjpe))
            logger.info(f"消融 {label} seed={seed}: MPJPE={report.mpjpe:.2f}mm")
    return rows


def ablation_medians(rows: Sequence[Union[AblationRow, Dict]]) -> Dict[str, Dict[str, float]]:
    """
    每个消融行的种子中位数, 保持行顺序

    Returns:
        dict: stage -> {"mpjpe": ..., "pa_mpjpe": ...}
    """
    grouped: Dict[str, Dict[str, List[float]]] = {}
    for row in rows:
        data = row.model_dump() if isinstance(row, AblationRow) else row
        entry = grouped.setdefault(data["stage"], {"mpjpe": [], "pa_mpjpe": []})
        entry["mpjpe"].append(float(data["mpjpe"]))
        entry["pa_mpjpe"].append(float(data["pa_mpjpe"]))
    return {
        stage: {name: float(np.median(values)) for name, values in metrics.items()}
        for stage, metrics in grouped.items()
    }


def relation_sweep_rows(
    G_source: ImageEncoder,
    pose_coder: PoseCoder,
    motion_coder: MotionCoder,
    bank: UnpairedPoseBank,
    target_set: TargetVideoSet,
    relations_config: RelationsConfig,
    adapt_config: AdaptConfig,
    eval_config: EvalConfig,
) -> List[RelationSweepRow]:
    """
    关系扫描: 每条候选姿态规则单独占据 Z3 槽位适配一次

    每行记录规则的潜空间距离与适配后的目标域误差, 用来比较非局部程度与适配效果。

    Raises:
        ConfigError: 规则不是姿态规则
        RelationUnlearnableError: 关系网络验证误差超过上限
    """
    rows: List[RelationSweepRow] = []
    for name in eval_config.sweep_rules:
        rule = get_rule(name, relations_config.theta, bank.seq_len)
        if rule.space != "pose":
            raise ConfigError(f"关系扫描只接受姿态规则: {name}")
        distance = latent_distance(rule, pose_coder, motion_coder, bank)
        network = train_relation(rule, pose_coder, motion_coder, bank, relations_config)
        frozen = FrozenComponents(pose_coder, motion_coder, {"Z3": network})
        result = adapt_target(G_source, target_set, frozen, adapt_config, energies=eval_config.sweep_energies)
        report = evaluate(result.encoder, pose_coder, target_set, eval_config)
        rows.append(RelationSweepRow(rule=rule.name, latent_distance=distance.mean,
                                     mpjpe=report.mpjpe, pa_mpjpe=report.pa_mpjpe))
        logger.info(f"关系扫描 {rule.name}: d^z={distance.mean:.4f}, MPJPE={report.mpjpe:.2f}mm")
    return rows
