"""
Relation Nets - 关系规则与关系网络

RelationRule 把同一个变换在姿态/序列空间与图像/片段空间的两个版本绑定在一起。
RelationNetwork 是冻结后的潜空间回归器 T^z_r (32 维) 或 T^v_r (128 维)。
latent_distance 只使用编码器与真实几何变换衡量一个关系的非局部程度, 不依赖关系网络参数。
"""

import logging
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from tqdm import tqdm

from ..utils.runtime import progress_enabled
from ..utils.validators import validate_rule_name
from .config import RelationsConfig
from .errors import ConfigError, RelationUnlearnableError, ShapeError, StageOrderError, UnknownRuleError
from .latent_models import (
    LATENT_DIM,
    MOTION_DIM,
    FreezableMixin,
    MotionCoder,
    PoseCoder,
    _mlp,
    embed_sequences,
    encode_pose,
)
from .models import LatentDistanceReport, RelationFitReport, TrainLog
from .pose_geometry import (
    DEFAULT_THETA,
    SEQ_LEN,
    flip_backward_seq,
    flip_inplane_backward_seq,
    flip_inplane_pose,
    flip_pose,
    rotate_inplane_pose,
    slow_anchor_seq,
    slow_backward_seq,
)
from .synth_world import UnpairedPoseBank, image_rule_transform, slow_anchor_clip

logger = logging.getLogger(__name__)

Space = Literal["pose", "motion"]

# 基础规则: 名称 -> (空间, rule_id, 图像规则, 是否带角度)
_KINDS = {
    "identity": ("pose", 0, "z0", False),
    "pose-flip": ("pose", 1, "z1", False),
    "inplane": ("pose", 2, "z2", True),
    "flip+inplane": ("pose", 3, "z3", True),
    "motion-identity": ("motion", 0, "v0", False),
    "flip-backward": ("motion", 1, "v1", False),
    "flip+inplane-backward": ("motion", 2, "v2", True),
    "slow-backward": ("motion", 3, "v3", False),
}
_ANGLE_NAME = re.compile(r"^(inplane|flip\+inplane)-(-?\d+(?:\.\d+)?)(-backward)?$")
DIAGNOSTIC_KINDS = ("identity", "motion-identity")


@dataclass(frozen=True)
class RelationRule:
    """一条关系规则: 姿态/序列变换与图像/片段变换成对注册"""
    kind: str
    space: Space
    rule_id: int
    image_key: str
    theta: Optional[float] = None
    seq_len: int = SEQ_LEN

    @property
    def name(self) -> str:
        if self.theta is None:
            return self.kind
        if self.kind == "flip+inplane-backward":
            return f"flip+inplane-{self.theta:g}-backward"
        return f"{self.kind}-{self.theta:g}"

    @property
    def order(self) -> str:
        return "lower" if self.space == "pose" else "higher"

    @property
    def is_diagnostic(self) -> bool:
        return self.kind in DIAGNOSTIC_KINDS

    @property
    def source_length(self) -> int:
        """序列规则输入的长度: 慢放反向需要 2T"""
        return 2 * self.seq_len if self.kind == "slow-backward" else self.seq_len

    def pose_transform(self, y: np.ndarray) -> np.ndarray:
        """T^y_r, 只对姿态规则有效"""
        self._require("pose")
        if self.kind == "identity":
            return np.array(y, copy=True)
        if self.kind == "pose-flip":
            return flip_pose(y)
        if self.kind == "inplane":
            return rotate_inplane_pose(y, self.theta)
        return flip_inplane_pose(y, self.theta)

    def sequence_pair(self, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(锚序列, 正样本序列), 均为长度 T; 慢放反向的锚为长序列的 15FPS 采样"""
        self._require("motion")
        if self.kind == "slow-backward":
            return slow_anchor_seq(Y, self.seq_len), slow_backward_seq(Y, self.seq_len)
        if Y.shape[-3] != self.seq_len:
            raise ShapeError(f"规则 {self.name} 需要长度 {self.seq_len} 的序列, 当前: {Y.shape[-3]}")
        if self.kind == "motion-identity":
            return Y, np.array(Y, copy=True)
        if self.kind == "flip-backward":
            return Y, flip_backward_seq(Y)
        return Y, flip_inplane_backward_seq(Y, self.theta)

    def image_pair(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """图像空间的 (锚, 正样本); 片段规则输入长度为 source_length"""
        theta = DEFAULT_THETA if self.theta is None else self.theta
        positive = image_rule_transform(self.image_key, x, theta=theta, seq_len=self.seq_len)
        anchor = slow_anchor_clip(x, self.seq_len) if self.kind == "slow-backward" else np.asarray(x)
        return anchor, positive

    def _require(self, space: Space) -> None:
        if self.space != space:
            raise ConfigError(f"规则 {self.name} 属于 {self.space} 空间, 不能用于 {space}")


def get_rule(name: str, theta: float = DEFAULT_THETA, seq_len: int = SEQ_LEN) -> RelationRule:
    """
    按名称解析规则

    "inplane" / "flip+inplane" / "flip+inplane-backward" 使用给定 theta,
    也可以直接写出角度, 例如 "inplane-5"、"flip+inplane-15-backward"。

    Raises:
        UnknownRuleError: 未注册的名称
    """
    if not validate_rule_name(name):
        raise UnknownRuleError(f"规则名称格式无效: {name}")
    if name in _KINDS:
        space, rule_id, image_key, angled = _KINDS[name]
        return RelationRule(name, space, rule_id, image_key, float(theta) if angled else None, seq_len)
    match = _ANGLE_NAME.match(name)
    if match:
        kind = match.group(1) + ("-backward" if match.group(3) else "")
        space, rule_id, image_key, _ = _KINDS[kind]
        return RelationRule(kind, space, rule_id, image_key, float(match.group(2)), seq_len)
    raise UnknownRuleError(f"未注册的关系规则: {name}")


def registered_rules(theta: float = DEFAULT_THETA) -> List[RelationRule]:
    """默认候选集: 三个姿态规则与三个运动规则"""
    names = ["pose-flip", "inplane", "flip+inplane", "flip-backward", "flip+inplane-backward", "slow-backward"]
    return [get_rule(name, theta) for name in names]


class RelationNetwork(FreezableMixin, nn.Module):
    """
    潜空间关系回归器

    残差形式 T(x) = x + f(x), f 的最后一层零初始化, 训练前即为恒等映射。
    """

    def __init__(self, rule: RelationRule, hidden: Optional[int] = None):
        super().__init__()
        dim = LATENT_DIM if rule.space == "pose" else MOTION_DIM
        hidden = hidden or (64 if rule.space == "pose" else 256)
        self.rule = rule
        self.hparams = {"rule": rule.name, "space": rule.space, "dim": dim, "hidden": hidden}
        self.net = _mlp([dim, hidden, hidden, dim])
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.fit_report: Optional[RelationFitReport] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.net(x)


def _pose_pairs(rule: RelationRule, pose_coder: PoseCoder, data) -> Tuple[np.ndarray, np.ndarray]:
    poses = data.poses if isinstance(data, UnpairedPoseBank) else np.asarray(data)
    return encode_pose(pose_coder, poses), encode_pose(pose_coder, rule.pose_transform(poses))


def _motion_sources(rule: RelationRule, data) -> np.ndarray:
    if isinstance(data, UnpairedPoseBank):
        sequences = data.long_sequences if rule.kind == "slow-backward" else data.sequences
    else:
        sequences = np.asarray(data)
    if len(sequences) == 0:
        raise ShapeError(f"规则 {rule.name} 没有可用的长度 {rule.source_length} 序列")
    return sequences


def _motion_pairs(rule: RelationRule, pose_coder: PoseCoder, motion_coder: MotionCoder,
                  data) -> Tuple[np.ndarray, np.ndarray]:
    anchor, positive = rule.sequence_pair(_motion_sources(rule, data))
    return embed_sequences(pose_coder, motion_coder, anchor), embed_sequences(pose_coder, motion_coder, positive)


def _fit(rule: RelationRule, x: np.ndarray, target: np.ndarray, config: RelationsConfig,
         ceiling: float) -> RelationNetwork:
    n = len(x)
    rng = np.random.default_rng([config.seed, rule.rule_id, 0 if rule.space == "pose" else 1])
    order = rng.permutation(n)
    n_held = max(1, int(round(n * config.val_fraction))) if n > 1 else 0
    held, train = order[:n_held], order[n_held:]
    if n_held == 0:
        held = train

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    network = RelationNetwork(rule)
    opt = torch.optim.Adam(network.parameters(), lr=config.lr)
    X = torch.as_tensor(x[train], dtype=torch.float32)
    Y = torch.as_tensor(target[train], dtype=torch.float32)
    log = TrainLog(stage=f"relation:{rule.name}", seed=config.seed)

    epochs = tqdm(range(config.epochs), desc=f"relation {rule.name}", disable=not progress_enabled())
    for _ in epochs:
        perm = torch.randperm(len(X), generator=generator)
        total, n_batches = 0.0, 0
        for start in range(0, len(X), config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss = F.mse_loss(network(X[idx]), Y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.item())
            n_batches += 1
        log.append("mse", total / max(n_batches, 1))

    network.freeze()
    with torch.no_grad():
        pred = network(torch.as_tensor(x[held], dtype=torch.float32)).numpy()
    diff = pred - target[held]
    l2 = np.linalg.norm(diff, axis=-1)
    network.fit_report = RelationFitReport(
        rule=rule.name,
        heldout_component_error=float(np.abs(diff).mean()),
        heldout_l2_error=float(l2.mean()),
        heldout_l2_max=float(l2.max()),
        n_train=int(len(train)),
        n_heldout=int(len(held)),
    )
    logger.info(f"关系网络 {rule.name} 训练完成: 验证误差 {network.fit_report.heldout_component_error:.5f}/分量")
    if network.fit_report.heldout_component_error > ceiling:
        raise RelationUnlearnableError(
            f"关系 {rule.name} 验证误差 {network.fit_report.heldout_component_error:.4f} 超过上限 {ceiling}",
            log=log,
            report=network.fit_report.model_dump(),
        )
    return network


def train_pose_relation(rule: RelationRule, pose_coder: PoseCoder, data: Union[UnpairedPoseBank, np.ndarray],
                        config: RelationsConfig) -> RelationNetwork:
    """
    训练姿态关系网络 T^z_r: 回归 E_p(y) -> E_p(T^y_r(y))

    Raises:
        ConfigError: 规则不属于姿态空间
        StageOrderError: pose_coder 未冻结
        RelationUnlearnableError: 验证误差超过 config.pose_ceiling
    """
    if rule.space != "pose":
        raise ConfigError(f"规则 {rule.name} 不是姿态规则")
    pose_coder.require_frozen("PoseCoder")
    z, z_plus = _pose_pairs(rule, pose_coder, data)
    return _fit(rule, z, z_plus, config, config.pose_ceiling)


def train_motion_relation(rule: RelationRule, pose_coder: PoseCoder, motion_coder: MotionCoder,
                          data: Union[UnpairedPoseBank, np.ndarray], config: RelationsConfig) -> RelationNetwork:
    """
    训练运动关系网络 T^v_r: 回归 v = E_m∘E_p(Y) -> v^+ = E_m∘E_p(T^Y_r(Y))

    慢放反向使用 2T 长序列, 锚为其 15FPS 采样。
    """
    if rule.space != "motion":
        raise ConfigError(f"规则 {rule.name} 不是运动规则")
    pose_coder.require_frozen("PoseCoder")
    motion_coder.require_frozen("MotionCoder")
    v, v_plus = _motion_pairs(rule, pose_coder, motion_coder, data)
    return _fit(rule, v, v_plus, config, config.motion_ceiling)


def train_relation(rule: RelationRule, pose_coder: PoseCoder, motion_coder: Optional[MotionCoder],
                   data, config: RelationsConfig) -> RelationNetwork:
    if rule.space == "pose":
        return train_pose_relation(rule, pose_coder, data, config)
    if motion_coder is None:
        raise StageOrderError(f"运动规则 {rule.name} 需要已训练的 MotionCoder")
    return train_motion_relation(rule, pose_coder, motion_coder, data, config)


def latent_distance(rule: RelationRule, pose_coder: PoseCoder, motion_coder: Optional[MotionCoder],
                    data: Union[UnpairedPoseBank, np.ndarray]) -> LatentDistanceReport:
    """
    d = 平均 ‖embed(y) - embed(T(y))‖, 姿态规则在 Z 空间, 运动规则在 V 空间

    只使用编码器与真实几何变换。
    """
    if rule.space == "pose":
        a, b = _pose_pairs(rule, pose_coder, data)
    else:
        if motion_coder is None:
            raise StageOrderError(f"运动规则 {rule.name} 需要已训练的 MotionCoder")
        a, b = _motion_pairs(rule, pose_coder, motion_coder, data)
    d = np.linalg.norm(a.astype(np.float64) - b.astype(np.float64), axis=-1)
    return LatentDistanceReport(
        rule=rule.name,
        space=rule.space,
        mean=float(d.mean()),
        std=float(d.std()),
        n_samples=int(len(d)),
    )


def rank_relations(
    candidates: Sequence[RelationRule],
    pose_coder: PoseCoder,
    motion_coder: Optional[MotionCoder],
    data,
    distances: Optional[Dict[str, LatentDistanceReport]] = None,
) -> List[RelationRule]:
    """
    按潜空间距离降序排序 (姿态规则在前, 运动规则在后), 距离相同按名称字典序

    Args:
        distances: 预先计算的距离报告, 缺失的规则现场计算

    Raises:
        ConfigError: 候选为空
    """
    if not candidates:
        raise ConfigError("候选关系为空")
    distances = dict(distances or {})
    for rule in candidates:
        if rule.name not in distances:
            distances[rule.name] = latent_distance(rule, pose_coder, motion_coder, data)

    ranked: List[RelationRule] = []
    for space in ("pose", "motion"):
        members = [rule for rule in candidates if rule.space == space]
        members.sort(key=lambda rule: (-distances[rule.name].mean, rule.name))
        ranked.extend(members)
    logger.info(f"关系排序: {[rule.name for rule in ranked]}")
    return ranked


POSE_SLOTS = ("Z3",)
MOTION_SLOTS = ("V2", "V3")


def select_relations(ranked: Iterable[RelationRule], n_pose: int = 1, n_motion: int = 2) -> Dict[str, RelationRule]:
    """默认选择策略: 最非局部的 n_pose 个姿态规则与 n_motion 个运动规则, 跳过诊断规则"""
    if n_pose > len(POSE_SLOTS) or n_motion > len(MOTION_SLOTS):
        raise ConfigError(f"最多选择 {len(POSE_SLOTS)} 个姿态规则与 {len(MOTION_SLOTS)} 个运动规则")
    ranked = [rule for rule in ranked if not rule.is_diagnostic]
    pose = [rule for rule in ranked if rule.space == "pose"][:n_pose]
    motion = [rule for rule in ranked if rule.space == "motion"][:n_motion]
    selected = dict(zip(POSE_SLOTS, pose))
    selected.update(zip(MOTION_SLOTS, motion))
    return selected


def relation_checksums(networks: Dict[str, RelationNetwork]) -> Dict[str, str]:
    return {name: network.checksum() for name, network in sorted(networks.items())}
