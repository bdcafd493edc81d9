"""
Models - 数据模型

定义骨架、评估指标、训练日志、潜空间距离、实验报告等数据模型
"""

import logging
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

# 不参与左右配对的躯干中线关节
MIDLINE_NAMES = ("pelvis", "spine", "neck", "head")


class SkeletonSpec(BaseModel):
    """骨架定义模型"""
    model_config = ConfigDict(frozen=True)

    joint_names: List[str] = Field(..., description="17 个关节名称 (有序)")
    parent_index: List[int] = Field(..., description="每个关节的父关节索引, 根关节指向自身")
    left_right_pairs: List[Tuple[int, int]] = Field(..., description="左右对称关节对 (left_id, right_id)")
    bone_lengths: List[float] = Field(..., description="每个关节到父关节的名义骨长 (米), 根关节为 0")

    @model_validator(mode="after")
    def _check_topology(self) -> "SkeletonSpec":
        n = len(self.joint_names)
        if n != 17:
            raise ValueError(f"骨架必须有 17 个关节, 当前: {n}")
        if len(self.parent_index) != n or len(self.bone_lengths) != n:
            raise ValueError("parent_index / bone_lengths 长度必须与关节数一致")
        roots = [j for j, p in enumerate(self.parent_index) if p == j]
        if roots != [0]:
            raise ValueError(f"必须有且仅有一个根关节 (索引 0), 当前: {roots}")
        # 父关节链必须能回到根, 即树结构
        for j in range(n):
            seen = set()
            k = j
            while k != 0:
                if k in seen or not 0 <= self.parent_index[k] < n:
                    raise ValueError(f"父关节图不是树: 关节 {j}")
                seen.add(k)
                k = self.parent_index[k]
        paired = [j for pair in self.left_right_pairs for j in pair]
        if len(paired) != len(set(paired)):
            raise ValueError("left_right_pairs 不是完美匹配: 存在重复关节")
        if any(not 0 <= j < n for j in paired):
            raise ValueError("left_right_pairs 中的关节索引越界")
        for left, right in self.left_right_pairs:
            left_name, right_name = self.joint_names[left], self.joint_names[right]
            if not (left_name.startswith("l_") and right_name == "r_" + left_name[2:]):
                raise ValueError(f"左右对称对不匹配: ({left_name}, {right_name})")
        sided = {j for j, name in enumerate(self.joint_names) if name[:2] in ("l_", "r_")}
        if sided != set(paired):
            missing = sorted(self.joint_names[j] for j in sided - set(paired))
            raise ValueError(f"左右侧关节必须恰好出现在一个对称对中, 未配对: {missing}")
        missing_midline = [name for name in MIDLINE_NAMES if name not in self.joint_names]
        if missing_midline:
            raise ValueError(f"缺少中线关节: {missing_midline}")
        perm = self.flip_permutation()
        if any(self.parent_index[perm[j]] != perm[self.parent_index[j]] for j in range(n)):
            raise ValueError("左右交换后父关节图不一致")
        return self

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def midline_joints(self) -> List[int]:
        paired = {j for pair in self.left_right_pairs for j in pair}
        return [j for j in range(self.n_joints) if j not in paired]

    def flip_permutation(self) -> List[int]:
        """左右交换的关节置换"""
        perm = list(range(self.n_joints))
        for left, right in self.left_right_pairs:
            perm[left], perm[right] = right, left
        return perm


class MetricReport(BaseModel):
    """评估指标模型 (单位: 毫米 / 百分比)"""
    mpjpe: float = Field(..., description="MPJPE (mm)")
    pa_mpjpe: float = Field(..., description="Procrustes 对齐后的 MPJPE (mm)")
    pck: float = Field(..., description="PCK@150mm (%)")
    auc: float = Field(..., description="阈值 (0, 150] 上的平均 PCK (%)")
    n_samples: int = Field(..., description="样本数")

    @field_validator("pck", "auc")
    @classmethod
    def _check_percent(cls, value: float) -> float:
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"百分比超出 [0, 100]: {value}")
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> "MetricReport":
        if self.auc > self.pck + 1e-9:
            raise ValueError(f"AUC ({self.auc}) 不能大于 PCK ({self.pck})")
        if self.pa_mpjpe > self.mpjpe + 1e-6:
            # 均值范数形式下不保证成立 (平方和形式下成立), 只记录
            logger.warning(f"PA-MPJPE ({self.pa_mpjpe:.3f}) 大于 MPJPE ({self.mpjpe:.3f})")
        return self


class TrainLog(BaseModel):
    """训练日志模型"""
    stage: str = Field(..., description="阶段名称")
    seed: int = Field(..., description="训练随机种子")
    curves: Dict[str, List[float]] = Field(default_factory=dict, description="按 epoch 记录的损失曲线")
    metrics: Dict[str, float] = Field(default_factory=dict, description="训练结束时的指标")

    def append(self, name: str, value: float) -> None:
        self.curves.setdefault(name, []).append(float(value))


class RelationFitReport(BaseModel):
    """关系网络拟合报告"""
    rule: str = Field(..., description="规则名称")
    heldout_component_error: float = Field(..., description="验证集每分量平均绝对误差")
    heldout_l2_error: float = Field(..., description="验证集平均 L2 误差")
    heldout_l2_max: float = Field(..., description="验证集最大 L2 误差")
    n_train: int = Field(..., description="训练样本数")
    n_heldout: int = Field(..., description="验证样本数")


class LatentDistanceReport(BaseModel):
    """潜空间距离报告 (d^z / d^v)"""
    rule: str = Field(..., description="规则名称")
    space: str = Field(..., description="pose 对应 d^z, motion 对应 d^v")
    mean: float = Field(..., ge=0.0, description="平均距离")
    std: float = Field(..., ge=0.0, description="距离标准差")
    n_samples: int = Field(..., description="样本数")


class AblationRow(BaseModel):
    """消融实验单行结果"""
    stage: str = Field(..., description="累积能量集合名称")
    seed: int = Field(..., description="适配随机种子")
    mpjpe: float = Field(..., description="目标域 MPJPE (mm)")
    pa_mpjpe: float = Field(..., description="目标域 PA-MPJPE (mm)")


class RelationSweepRow(BaseModel):
    """关系扫描单行: 一条姿态规则单独驱动适配时的潜空间距离与目标域误差"""
    rule: str = Field(..., description="姿态关系规则")
    latent_distance: float = Field(..., description="该规则在 Z 空间的平均潜空间距离")
    mpjpe: float = Field(..., description="目标域 MPJPE (mm)")
    pa_mpjpe: float = Field(..., description="目标域 PA-MPJPE (mm)")


class ExperimentReport(BaseModel):
    """实验报告模型"""
    config_hash: str = Field(..., description="配置哈希")
    completed_stages: List[str] = Field(default_factory=list, description="已完成阶段")
    metrics: Dict[str, MetricReport] = Field(default_factory=dict, description="按 (阶段, 域) 命名的评估指标")
    diagnostics: Dict[str, float] = Field(default_factory=dict, description="先验拟合、合理率等诊断量")
    train_logs: Dict[str, TrainLog] = Field(default_factory=dict, description="各阶段训练日志")
    relation_fits: Dict[str, RelationFitReport] = Field(default_factory=dict, description="关系网络拟合报告")
    latent_distances: List[LatentDistanceReport] = Field(default_factory=list, description="潜空间距离表")
    ranking: Dict[str, List[str]] = Field(default_factory=dict, description="按空间排序的规则")
    selected_rules: Dict[str, str] = Field(default_factory=dict, description="能量项槽位 -> 规则名称")
    equivariance_gap: Dict[str, float] = Field(default_factory=dict, description="适配前后的等变差距")
    ablation: List[AblationRow] = Field(default_factory=list, description="消融结果")
    relation_sweep: List[RelationSweepRow] = Field(default_factory=list, description="关系扫描结果")
    loss_traces: Dict[str, str] = Field(default_factory=dict, description="损失轨迹 CSV 相对路径")
    checksums: Dict[str, str] = Field(default_factory=dict, description="检查点名称 -> 校验和")

    def is_empty(self) -> bool:
        return not (self.latent_distances or self.loss_traces or self.ablation or self.relation_sweep)
